//! Hand-rolled neural-network layers and the conditional denoiser built from
//! them, with explicit forward/backward passes (no autodiff framework).
//!
//! Everything is generic over the element type so the same code runs in f32
//! for training and f64 for finite-difference gradient verification. All
//! parameters live in a flat [`ParamStore`]; layers hold only parameter ids,
//! which keeps optimizer state, EMA shadows, and checkpoints trivial to
//! iterate in a deterministic registration order.

pub mod attn;
pub mod embed;
pub mod ops;
pub mod params;
pub mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::stream;

pub use ops::{Elem, PadMode};
pub use params::{GradStore, ParamId, ParamStore};
pub use unet::{DenoiseTape, TrunkTape, UNet};

// =========================================================================
// Architecture descriptor
// =========================================================================

/// Fully determines every tensor shape in the network. State channels follow
/// the domain transform (pixel: 1, one-level packet: 4, two-level: 16); the
/// condition always matches the state layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub state_channels: usize,
    pub cond_channels: usize,
    /// Feature widths per resolution stage, fine to coarse.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embed_dim: usize,
    pub groups: usize,
    /// Self-attention at the coarsest resolution.
    pub attention: bool,
    /// Periodic (wrap-around) convolution padding instead of zero padding.
    pub periodic_padding: bool,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            state_channels: 1,
            cond_channels: 1,
            widths: vec![32, 64, 128],
            blocks_per_stage: 2,
            embed_dim: 128,
            groups: 8,
            attention: true,
            periodic_padding: false,
        }
    }
}

impl ArchDescriptor {
    /// Same trunk, channel counts adjusted to a transform's coefficient
    /// layout.
    pub fn with_channels(mut self, state: usize, cond: usize) -> Self {
        self.state_channels = state;
        self.cond_channels = cond;
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.state_channels == 0 || self.cond_channels == 0 {
            return Err("state/cond channel counts must be positive".into());
        }
        if self.widths.is_empty() {
            return Err("at least one resolution stage is required".into());
        }
        if self.blocks_per_stage == 0 {
            return Err("blocks_per_stage must be positive".into());
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(format!("embed_dim must be even and ≥ 2, got {}", self.embed_dim));
        }
        if self.groups == 0 {
            return Err("groups must be positive".into());
        }
        for &w in &self.widths {
            if w == 0 || w % self.groups != 0 {
                return Err(format!(
                    "stage width {w} must be a positive multiple of groups={}",
                    self.groups
                ));
            }
        }
        Ok(())
    }

    /// Spatial dims fed to the network must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1usize << (self.widths.len().saturating_sub(1))
    }
}

// =========================================================================
// Parameter bundle
// =========================================================================

/// The trainable weights plus their exponential-moving-average shadow, tied
/// to the architecture that determines their shapes. Sampling and evaluation
/// always read the EMA weights; the raw store is what the optimizer updates.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub arch: ArchDescriptor,
    pub store: ParamStore<f32>,
    pub ema: ParamStore<f32>,
}

impl DenoiserParams {
    /// Deterministically initializes a network and its parameter bundle.
    pub fn init(arch: &ArchDescriptor, seed: u64) -> Result<(UNet, Self)> {
        let mut store = ParamStore::new();
        let net = UNet::new(arch, &mut store, &mut stream(seed, "model-init", 0))?;
        let ema = store.clone_values();
        Ok((
            net,
            Self {
                arch: arch.clone(),
                store,
                ema,
            },
        ))
    }

    /// Rebuilds the network for an existing bundle (e.g. after loading a
    /// checkpoint); the freshly drawn weights are discarded in favor of the
    /// stored ones, so only the registration order matters.
    pub fn rebuild_net(&self) -> Result<UNet> {
        let mut scratch = ParamStore::<f32>::new();
        let net = UNet::new(&self.arch, &mut scratch, &mut stream(0, "model-init", 0))?;
        if scratch.len() != self.store.len() {
            return Err(CoreError::Config(format!(
                "architecture yields {} tensors but bundle holds {}",
                scratch.len(),
                self.store.len()
            )));
        }
        Ok(net)
    }

    pub fn count_params(&self) -> usize {
        self.store.count_params()
    }
}

// =========================================================================
// Tests
// =========================================================================

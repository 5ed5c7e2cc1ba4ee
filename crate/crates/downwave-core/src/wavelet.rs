//! Orthonormal 2D Haar wavelet analysis and synthesis.
//!
//! A single analysis level maps each non-overlapping 2×2 pixel block
//! `[[a, b], [c, d]]` to four coefficients
//!
//! ```text
//!   A = (a + b + c + d) / 2      (approximation)
//!   V = (a − b + c − d) / 2      (vertical detail: left vs right columns)
//!   H = (a + b − c − d) / 2      (horizontal detail: top vs bottom rows)
//!   D = (a − b − c + d) / 2      (diagonal detail)
//! ```
//!
//! The 4×4 block matrix is orthonormal, so energy is preserved exactly
//! (Parseval) and unit-variance white noise in pixel space stays
//! unit-variance white noise in coefficient space — the property that makes
//! a standard-normal diffusion prior equally well-posed in either domain.
//!
//! Multi-level analysis applies the same step recursively to *every*
//! sub-band (a full wavelet packet), flattening level L into 4^L channels of
//! shape (H/2^L)×(W/2^L), ordered by recursive (A, V, H, D) expansion.
//! Channel 0 is then the sole pure-approximation channel; every other
//! channel carries detail. The element count is conserved at every level.

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};
use crate::grid::GridField;

// =========================================================================
// Coefficient container
// =========================================================================

/// A stack of 4^L wavelet sub-band planes for one field.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffTensor {
    /// Decomposition level L >= 1.
    pub level: usize,
    /// Height of the original pixel field.
    pub base_height: usize,
    /// Width of the original pixel field.
    pub base_width: usize,
    /// Channel-major data: shape (4^L, H/2^L, W/2^L).
    pub data: Array3<f32>,
}

impl CoeffTensor {
    /// Validates the shape bookkeeping of an externally assembled tensor.
    pub fn new(level: usize, base_height: usize, base_width: usize, data: Array3<f32>) -> Result<Self> {
        let channels = 4usize.pow(level as u32);
        let div = 1usize << level;
        if level == 0 || base_height % div != 0 || base_width % div != 0 {
            return Err(CoreError::Dimension(format!(
                "base dims {base_height}x{base_width} not divisible by 2^{level}"
            )));
        }
        let expect = (channels, base_height / div, base_width / div);
        if data.dim() != expect {
            return Err(CoreError::Format(format!(
                "coefficient tensor shape {:?} does not match level-{level} layout {:?}",
                data.dim(),
                expect
            )));
        }
        Ok(Self {
            level,
            base_height,
            base_width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// Total element count; equals base_height·base_width by construction.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

// =========================================================================
// Single-level analysis / synthesis
// =========================================================================

/// One orthonormal Haar analysis step on a raw raster: (H, W) → (4, H/2, W/2).
pub(crate) fn haar_analyze(src: &Array2<f32>) -> Result<Array3<f32>> {
    let (h, w) = src.dim();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(CoreError::Dimension(format!(
            "Haar analysis needs positive even dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f32>::zeros((4, oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let a = src[[2 * i, 2 * j]];
            let b = src[[2 * i, 2 * j + 1]];
            let c = src[[2 * i + 1, 2 * j]];
            let d = src[[2 * i + 1, 2 * j + 1]];
            out[[0, i, j]] = 0.5 * (a + b + c + d);
            out[[1, i, j]] = 0.5 * (a - b + c - d);
            out[[2, i, j]] = 0.5 * (a + b - c - d);
            out[[3, i, j]] = 0.5 * (a - b - c + d);
        }
    }
    Ok(out)
}

/// One orthonormal Haar synthesis step: (4, H/2, W/2) → (H, W). Exact
/// inverse of [`haar_analyze`] because the block matrix is its own inverse
/// up to transposition.
pub(crate) fn haar_synthesize(coeffs: &ndarray::ArrayView3<f32>) -> Result<Array2<f32>> {
    let (c, oh, ow) = coeffs.dim();
    if c != 4 {
        return Err(CoreError::Format(format!(
            "Haar synthesis expects 4 channels, got {c}"
        )));
    }
    let mut out = Array2::<f32>::zeros((2 * oh, 2 * ow));
    for i in 0..oh {
        for j in 0..ow {
            let av = coeffs[[0, i, j]];
            let vv = coeffs[[1, i, j]];
            let hv = coeffs[[2, i, j]];
            let dv = coeffs[[3, i, j]];
            out[[2 * i, 2 * j]] = 0.5 * (av + vv + hv + dv);
            out[[2 * i, 2 * j + 1]] = 0.5 * (av - vv + hv - dv);
            out[[2 * i + 1, 2 * j]] = 0.5 * (av + vv - hv - dv);
            out[[2 * i + 1, 2 * j + 1]] = 0.5 * (av - vv - hv + dv);
        }
    }
    Ok(out)
}

/// Level-1 analysis of a field: (H, W) → 4 sub-bands (A, V, H, D).
pub fn dwt2(field: &GridField) -> Result<CoeffTensor> {
    let data = haar_analyze(field.values())?;
    CoeffTensor::new(1, field.height(), field.width(), data)
}

/// Level-1 synthesis, the exact inverse of [`dwt2`].
pub fn idwt2(coeffs: &CoeffTensor) -> Result<GridField> {
    if coeffs.level != 1 {
        return Err(CoreError::Format(format!(
            "idwt2 expects a level-1 tensor, got level {}",
            coeffs.level
        )));
    }
    let out = haar_synthesize(&coeffs.data.view())?;
    GridField::from_values(out)
}

// =========================================================================
// Multi-level packet transform
// =========================================================================

/// Level-L packet analysis: every sub-band is recursively re-analyzed, so
/// level L yields 4^L channels ordered by recursive (A, V, H, D) expansion
/// (channel index in base-4 spells the path from coarse to fine).
pub fn dwt2_multi(field: &GridField, levels: usize) -> Result<CoeffTensor> {
    if levels == 0 {
        return Err(CoreError::Argument("levels must be >= 1".into()));
    }
    let div = 1usize << levels;
    if field.height() % div != 0 || field.width() % div != 0 {
        return Err(CoreError::Dimension(format!(
            "dims {}x{} not divisible by 2^{levels}",
            field.height(),
            field.width()
        )));
    }
    // Planes at the current level, in channel order.
    let mut planes: Vec<Array2<f32>> = vec![field.values().clone()];
    for _ in 0..levels {
        let mut next = Vec::with_capacity(planes.len() * 4);
        for p in &planes {
            let sub = haar_analyze(p)?;
            for c in 0..4 {
                next.push(sub.index_axis(ndarray::Axis(0), c).to_owned());
            }
        }
        planes = next;
    }
    let (ph, pw) = planes[0].dim();
    let mut data = Array3::<f32>::zeros((planes.len(), ph, pw));
    for (c, p) in planes.iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), c).assign(p);
    }
    CoeffTensor::new(levels, field.height(), field.width(), data)
}

/// Inverse of [`dwt2_multi`]: collapses 4^L channels back to the pixel field.
pub fn idwt2_multi(coeffs: &CoeffTensor) -> Result<GridField> {
    let mut planes: Vec<Array2<f32>> = (0..coeffs.channels())
        .map(|c| coeffs.data.index_axis(ndarray::Axis(0), c).to_owned())
        .collect();
    for _ in 0..coeffs.level {
        let mut next = Vec::with_capacity(planes.len() / 4);
        for group in planes.chunks(4) {
            let (gh, gw) = group[0].dim();
            let mut quad = Array3::<f32>::zeros((4, gh, gw));
            for (c, p) in group.iter().enumerate() {
                quad.index_axis_mut(ndarray::Axis(0), c).assign(p);
            }
            next.push(haar_synthesize(&quad.view())?);
        }
        planes = next;
    }
    debug_assert_eq!(planes.len(), 1);
    GridField::from_values(planes.pop().expect("exactly one plane remains"))
}

// =========================================================================
// Domain transform abstraction
// =========================================================================

/// The representation the diffusion operates in: raw pixels (`Identity`,
/// used by the pixel-space baseline) or a Haar packet of a given level.
/// Fields move through `forward` into (C, h, w) tensors and back through
/// `inverse`; both directions are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DomainTransform {
    Identity,
    Haar { level: usize },
}

impl DomainTransform {
    /// Parses the CLI/config spelling: `identity`, `haar-1`, `haar-2`, ...
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "identity" || t == "pixel" {
            return Ok(Self::Identity);
        }
        if let Some(level) = t.strip_prefix("haar-") {
            let level: usize = level
                .parse()
                .map_err(|_| CoreError::Config(format!("invalid transform '{s}'")))?;
            if level == 0 || level > 4 {
                return Err(CoreError::Config(format!(
                    "haar level must be in 1..=4, got {level}"
                )));
            }
            return Ok(Self::Haar { level });
        }
        Err(CoreError::Config(format!(
            "unknown transform '{s}' (expected 'identity' or 'haar-<level>')"
        )))
    }

    pub fn name(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::Haar { level } => format!("haar-{level}"),
        }
    }

    /// Decomposition depth (0 for the identity transform).
    pub fn level(&self) -> usize {
        match self {
            Self::Identity => 0,
            Self::Haar { level } => *level,
        }
    }

    /// Number of channels of the transformed representation.
    pub fn channels(&self) -> usize {
        match self {
            Self::Identity => 1,
            Self::Haar { level } => 4usize.pow(*level as u32),
        }
    }

    /// Spatial dims of the transformed representation of an HxW field.
    pub fn state_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        match self {
            Self::Identity => Ok((height, width)),
            Self::Haar { level } => {
                let div = 1usize << level;
                if height % div != 0 || width % div != 0 {
                    return Err(CoreError::Dimension(format!(
                        "dims {height}x{width} not divisible by 2^{level}"
                    )));
                }
                Ok((height / div, width / div))
            }
        }
    }

    /// Field → (C, h, w) tensor.
    pub fn forward(&self, field: &GridField) -> Result<Array3<f32>> {
        match self {
            Self::Identity => {
                let (h, w) = field.values().dim();
                Ok(field
                    .values()
                    .clone()
                    .into_shape_with_order((1, h, w))
                    .expect("reshape (h,w) -> (1,h,w) cannot fail"))
            }
            Self::Haar { level } => Ok(dwt2_multi(field, *level)?.data),
        }
    }

    /// (C, h, w) tensor → field; exact inverse of [`Self::forward`].
    pub fn inverse(&self, data: &Array3<f32>, base_height: usize, base_width: usize) -> Result<GridField> {
        match self {
            Self::Identity => {
                let (c, h, w) = data.dim();
                if c != 1 || h != base_height || w != base_width {
                    return Err(CoreError::Dimension(format!(
                        "identity inverse expects (1, {base_height}, {base_width}), got ({c}, {h}, {w})"
                    )));
                }
                GridField::from_values(
                    data.clone()
                        .into_shape_with_order((h, w))
                        .expect("reshape (1,h,w) -> (h,w) cannot fail"),
                )
            }
            Self::Haar { level } => {
                let coeffs = CoeffTensor::new(*level, base_height, base_width, data.clone())?;
                idwt2_multi(&coeffs)
            }
        }
    }
}

// =========================================================================
// Tests
// =========================================================================

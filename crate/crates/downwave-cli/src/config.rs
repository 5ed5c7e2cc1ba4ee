//! Run configuration: one TOML file drives every subcommand.
//!
//! Paths are resolved relative to the directory containing the config file,
//! so a run directory can be relocated wholesale. Every command echoes its
//! fully resolved configuration (after command-line overrides) into its
//! output directory for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use downwave_core::model::ArchDescriptor;
use downwave_core::synth::StormParams;
use downwave_core::train::TrainConfig;
use downwave_core::{CoreError, DomainTransform, NoiseSchedule, Result};

// =========================================================================
// Sections
// =========================================================================

/// Synthetic dataset layout and generator knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub hr_height: usize,
    pub hr_width: usize,
    /// Coarsening factor between high- and low-resolution grids.
    pub factor: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Minimum fraction of wet (non-zero) pixels a field needs to enter the
    /// dataset.
    pub filter_fraction: f32,
    pub seed: u64,
    pub storm: StormParams,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            hr_height: 64,
            hr_width: 64,
            factor: 8,
            train_count: 400,
            test_count: 64,
            filter_fraction: 0.5,
            seed: 0,
            storm: StormParams::default(),
        }
    }
}

/// Network architecture and the coefficient domain it operates in.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `identity`, `haar-1`, or `haar-2`.
    pub transform: String,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub attention: bool,
    pub periodic_padding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let arch = ArchDescriptor::default();
        Self {
            transform: "haar-1".into(),
            widths: arch.widths,
            blocks_per_stage: arch.blocks_per_stage,
            embed_dim: arch.embed_dim,
            groups: arch.groups,
            attention: arch.attention,
            periodic_padding: arch.periodic_padding,
        }
    }
}

impl ModelSection {
    pub fn transform(&self) -> Result<DomainTransform> {
        DomainTransform::parse(&self.transform)
    }

    /// Architecture descriptor with channel counts implied by the transform.
    pub fn arch(&self) -> Result<ArchDescriptor> {
        self.arch_for(&self.transform()?)
    }

    /// Same widths/depth, channel counts for an explicit transform (the
    /// benchmark compares transforms under one architecture).
    pub fn arch_for(&self, transform: &DomainTransform) -> Result<ArchDescriptor> {
        let channels = transform.channels();
        let arch = ArchDescriptor {
            state_channels: channels,
            cond_channels: channels,
            widths: self.widths.clone(),
            blocks_per_stage: self.blocks_per_stage,
            embed_dim: self.embed_dim,
            groups: self.groups,
            attention: self.attention,
            periodic_padding: self.periodic_padding,
        };
        arch.validate().map_err(CoreError::Config)?;
        Ok(arch)
    }
}

/// Reverse-diffusion inference parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub steps: usize,
    pub seed: u64,
    /// Fields super-resolved per sampler invocation.
    pub batch: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            steps: 300,
            seed: 0,
            batch: 16,
        }
    }
}

/// Artifact locations; relative paths are anchored at the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Training-loss CSV (contains wall-clock times).
    pub log: PathBuf,
    pub output_dir: PathBuf,
    /// Low-resolution inputs for `sample` and the bicubic baseline in
    /// `evaluate`; defaults to the test split of `data_dir`.
    pub input_dir: Option<PathBuf>,
    /// Ground-truth fields for `evaluate`; defaults to the test split.
    pub truth_dir: Option<PathBuf>,
    pub report: PathBuf,
    pub bench_report: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint: "model.wck1".into(),
            log: "train_log.csv".into(),
            output_dir: "samples".into(),
            input_dir: None,
            truth_dir: None,
            report: "report.csv".into(),
            bench_report: "bench.csv".into(),
        }
    }
}

/// Wall-time comparison of the three domain transforms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// High-resolution grid size (square).
    pub size: usize,
    /// Sampler steps per generated field (identical across transforms).
    pub steps: usize,
    pub repetitions: usize,
    /// Fields generated per repetition.
    pub batch: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            size: 128,
            steps: 10,
            repetitions: 5,
            batch: 4,
            seed: 0,
        }
    }
}

// =========================================================================
// Top level
// =========================================================================

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub schedule: NoiseSchedule,
    pub training: TrainConfig,
    pub sampling: SamplingSection,
    pub paths: PathsSection,
    pub bench: BenchSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the seed of the section the subcommand draws from
    /// (data/training/sampling/bench).
    pub seed: Option<u64>,
    /// Replaces `sampling.steps` and `bench.steps`.
    pub steps: Option<usize>,
    /// Replaces `model.transform`.
    pub transform: Option<String>,
}

impl RunConfig {
    /// Loads, applies overrides, anchors paths, and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;

        if let Some(seed) = overrides.seed {
            config.data.seed = seed;
            config.training.seed = seed;
            config.sampling.seed = seed;
            config.bench.seed = seed;
        }
        if let Some(steps) = overrides.steps {
            config.sampling.steps = steps;
            config.bench.steps = steps;
        }
        if let Some(t) = &overrides.transform {
            config.model.transform = t.clone();
        }

        let base = path.parent().unwrap_or(Path::new("."));
        config.anchor_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn anchor_paths(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        anchor(&mut self.paths.data_dir);
        anchor(&mut self.paths.checkpoint);
        anchor(&mut self.paths.log);
        anchor(&mut self.paths.output_dir);
        anchor(&mut self.paths.report);
        anchor(&mut self.paths.bench_report);
        if let Some(p) = &mut self.paths.input_dir {
            anchor(p);
        }
        if let Some(p) = &mut self.paths.truth_dir {
            anchor(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        let d = &self.data;
        if d.factor == 0 {
            return err("data.factor must be positive".into());
        }
        if d.hr_height % d.factor != 0 || d.hr_width % d.factor != 0 {
            return err(format!(
                "data dims {}x{} not divisible by factor {}",
                d.hr_height, d.hr_width, d.factor
            ));
        }
        if d.train_count == 0 || d.test_count == 0 {
            return err("train_count and test_count must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.filter_fraction) {
            return err("data.filter_fraction must lie in [0, 1]".into());
        }
        d.storm.validate().map_err(CoreError::Config)?;

        let transform = self.model.transform()?;
        let arch = self.model.arch()?;
        let (sh, sw) = transform
            .state_dims(d.hr_height, d.hr_width)
            .map_err(|e| CoreError::Config(format!("transform vs data dims: {e}")))?;
        let div = arch.spatial_divisor();
        if sh % div != 0 || sw % div != 0 {
            return err(format!(
                "state dims {sh}x{sw} (after {}) not divisible by the \
                 network's spatial divisor {div}",
                transform.name()
            ));
        }

        self.schedule.validate().map_err(CoreError::Config)?;
        self.training.validate().map_err(CoreError::Config)?;

        if self.sampling.steps < 2 {
            return err("sampling.steps must be >= 2".into());
        }
        if self.sampling.batch == 0 {
            return err("sampling.batch must be positive".into());
        }

        let b = &self.bench;
        if b.repetitions < 3 {
            return err("bench.repetitions must be >= 3".into());
        }
        if b.steps < 2 || b.batch == 0 {
            return err("bench needs steps >= 2 and batch >= 1".into());
        }
        if b.size % d.factor != 0 {
            return err(format!(
                "bench.size {} not divisible by factor {}",
                b.size, d.factor
            ));
        }
        // The deepest benchmarked transform must still leave room for the
        // network's down-path.
        let deepest = DomainTransform::parse("haar-2").expect("known transform");
        let (bh, bw) = deepest
            .state_dims(b.size, b.size)
            .map_err(|e| CoreError::Config(format!("bench.size vs haar-2: {e}")))?;
        if bh % div != 0 || bw % div != 0 {
            return err(format!(
                "bench.size {} leaves haar-2 state dims {bh}x{bw} \
                 not divisible by the network's spatial divisor {div}",
                b.size
            ));
        }
        Ok(())
    }

    /// Serializes the resolved configuration (provenance echo).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CoreError::Config(format!("cannot serialize config: {e}")))
    }

    /// Writes the provenance echo for a command into `dir`.
    pub fn echo_into(&self, dir: &Path, command: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{command}.config.toml"));
        std::fs::write(&path, self.to_toml()?)?;
        Ok(())
    }
}

// =========================================================================
// Tests
// =========================================================================

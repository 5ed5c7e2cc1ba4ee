//! Dataset manifest: the JSON sidecar `gen-data` writes next to the pair
//! files. It records everything downstream commands need — grid geometry,
//! the generator configuration that produced the data, and the
//! normalization statistics computed over the training split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use downwave_core::synth::StormParams;
use downwave_core::{CoreError, NormStats, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub hr_height: usize,
    pub hr_width: usize,
    pub factor: usize,
    pub filter_fraction: f32,
    pub seed: u64,
    pub storm: StormParams,
    /// Pooled mean/std of the training high-resolution fields.
    pub stats: NormStats,
    /// Pair stems (e.g. `pair_0000`) under `train/` and `test/`.
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn save(&self, data_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Format(format!("manifest: {e}")))?;
        std::fs::write(data_dir.join(MANIFEST_NAME), text + "\n")?;
        Ok(())
    }

    pub fn load(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
    }
}

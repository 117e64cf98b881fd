//! Run configuration: one TOML file, every field optional.
//!
//! ```toml
//! seed = 42
//! deterministic = true
//!
//! [paths]
//! data_dir = "data"
//! out_dir = "runs/baseline"
//!
//! [dataset]
//! cases = 80
//!
//! [network]
//! variant = "m2"
//! depth = 3
//!
//! [train]
//! epochs = 25
//!
//! [phantom]
//! extent = [48, 48, 48]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scseg::data::PhantomSpec;
use scseg::train::TrainConfig;
use scseg::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory holding `manifest.json`.
    pub data_dir: PathBuf,
    /// Where training writes logs and checkpoints, and eval/infer write results.
    pub out_dir: PathBuf,
    /// Checkpoint for eval and infer; defaults to `<out_dir>/final.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            out_dir: "runs".into(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of generated cases; 80% train, 20% validation.
    pub cases: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { cases: 80 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `phantom.seed` and `train.seed` when set.
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub network: UNetConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.phantom.seed = seed;
        self.train.seed = seed;
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join(scseg::train::FINAL_CHECKPOINT))
    }
}

//! Run configuration: one TOML tree holding every hyperparameter of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionKind;
use crate::data::DataConfig;
use crate::eval::{ProbeConfig, DEFAULT_FRACTIONS};
use crate::masking::MaskingConfig;
use crate::model::ModelConfig;
use crate::numerics::OptimizerConfig;
use crate::objective::TrainConfig;
use crate::sampling::DEFAULT_THRESHOLD;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Pretraining corpus: a manifest file, or a synthetic corpus when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic_count: usize,
    pub classes: usize,
    pub dataset_id: String,
    /// Per-dataset sampling cap.
    pub threshold: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic_count: 2000,
            classes: 3,
            dataset_id: "synth".into(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Downstream task. A manifest must tag records with dataset ids `train`,
/// `val` and `test`; without one a labelled synthetic task is generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    pub manifest: Option<PathBuf>,
    pub classes: usize,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub synthetic_test: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            manifest: None,
            classes: 3,
            synthetic_train: 600,
            synthetic_val: 150,
            synthetic_test: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fractions: Vec<f64>,
    pub corruptions: Vec<CorruptionKind>,
    pub task: TaskConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            corruptions: CorruptionKind::ALL.to_vec(),
            task: TaskConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub data: DataConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            data: DataConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            masking: MaskingConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = origin.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.corpus.manifest, &mut cfg.eval.task.manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative manifest paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.model.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.masking.validate() {
            return bad(format!("masking: {e}"));
        }
        if let Err(e) = self.optimizer.validate() {
            return bad(format!("optimizer: {e}"));
        }
        if let Err(e) = self.train.validate() {
            return bad(format!("train: {e}"));
        }
        if let Err(e) = self.probe.validate() {
            return bad(format!("probe: {e}"));
        }
        let size = self.data.input_size;
        if size == 0 || size % self.model.encoder.patch_size != 0 {
            return bad(format!(
                "input_size {size} is not a multiple of patch_size {}",
                self.model.encoder.patch_size
            ));
        }
        if self.corpus.manifest.is_none() && (self.corpus.synthetic_count < 2 || self.corpus.classes == 0) {
            return bad("synthetic corpus needs at least 2 frames and 1 class".into());
        }
        if self.eval.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("eval fractions must lie in (0, 1]".into());
        }
        let t = &self.eval.task;
        if t.classes < 2 {
            return bad("downstream task needs at least 2 classes".into());
        }
        if t.manifest.is_none() && (t.synthetic_train == 0 || t.synthetic_val == 0 || t.synthetic_test == 0) {
            return bad("synthetic task splits must be non-empty".into());
        }
        Ok(())
    }
}

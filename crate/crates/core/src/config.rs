//! Run configuration: one TOML document covering projection, model, optimizer,
//! schedule, loss, augmentation and data, with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugConfig;
use crate::kitti::Split;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::projection::{ElevationConvention, ProjectionConfig};
use crate::tensor::{GroupHyper, ParamGroup};

/// Environment variable consulted when `data.root` is unset.
pub const DATA_ROOT_ENV: &str = "RANGESAM_DATA_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override {0:?}: expected dotted.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub backbone: GroupConfig,
    pub head: GroupConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            backbone: GroupConfig { lr: 0.0004, weight_decay: 0.001 },
            head: GroupConfig { lr: 0.001, weight_decay: 0.0001 },
        }
    }
}

impl OptimizerConfig {
    /// Group hyperparameters at schedule factor `scale` (lr multiplied, decay kept).
    pub fn hyper(&self, group: ParamGroup, scale: f64) -> GroupHyper {
        let g = match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Head => self.head,
        };
        GroupHyper { lr: g.lr * scale, weight_decay: g.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Fraction of all steps spent in linear warm-up.
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { epochs: 60, warmup_fraction: 5.0 / 60.0, batch_size: 2, max_steps: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Inverse square-root class frequency over the training data.
    #[default]
    Frequency,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub split: Split,
    /// Use procedurally generated scenes instead of a dataset on disk.
    pub synthetic: bool,
    pub synthetic_scenes: usize,
    /// Use only the first N scans of the split.
    pub max_scans: Option<usize>,
    pub class_weights: WeightMode,
    /// Label remap table; the bundled SemanticKITTI table when unset.
    pub remap: Option<PathBuf>,
    pub knn_k: usize,
    pub knn_window: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            split: Split::Train,
            synthetic: false,
            synthetic_scenes: 8,
            max_scans: None,
            class_weights: WeightMode::Frequency,
            remap: None,
            knn_k: 7,
            knn_window: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub projection: ProjectionConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub aug: AugConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            projection: ProjectionConfig { convention: ElevationConvention::SensorFov, ..Default::default() },
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            loss: LossConfig::default(),
            aug: AugConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale model and raster (16 x 256).
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        let (h, w) = model.input_hw;
        let mut cfg = Self { model, ..Self::default() };
        cfg.projection.height = h;
        cfg.projection.width = w;
        cfg
    }

    /// Fixed synthetic overfitting set: augmentation off, uniform class weights,
    /// sized for a few hundred steps.
    pub fn synthetic(mut self) -> Self {
        self.data.synthetic = true;
        self.data.class_weights = WeightMode::Uniform;
        self.aug.enabled = false;
        self.schedule.epochs = 75;
        self.schedule.max_steps = Some(300);
        self.optimizer.backbone.lr = 0.002;
        self.optimizer.head.lr = 0.004;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `dotted.path=value` overrides; values parse as TOML literals and
    /// fall back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut root = toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.to_string()))?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            if keys.iter().any(|k| k.is_empty()) {
                return Err(ConfigError::Override(o.to_string()));
            }
            let value = parse_literal(raw.trim());
            let mut node = &mut root;
            for (i, key) in keys.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| ConfigError::Override(o.to_string()))?;
                if i + 1 == keys.len() {
                    table.insert(key.to_string(), value.clone());
                    break;
                }
                node = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `data.root`, or the environment variable when unset.
    pub fn data_root(&self) -> Option<PathBuf> {
        self.data.root.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.projection.validate().map_err(|e| ConfigError::Invalid(format!("projection: {e}")))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        self.aug.validate().map_err(|e| ConfigError::Invalid(format!("aug: {e}")))?;
        if (self.projection.height, self.projection.width) != self.model.input_hw {
            return bad(format!(
                "projection raster {}x{} differs from model.input_hw {:?}",
                self.projection.height, self.projection.width, self.model.input_hw
            ));
        }
        if self.schedule.batch_size == 0 || self.schedule.epochs == 0 {
            return bad("schedule.batch_size and schedule.epochs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.schedule.warmup_fraction) {
            return bad(format!("schedule.warmup_fraction {} outside [0, 1]", self.schedule.warmup_fraction));
        }
        for (name, g) in [("backbone", self.optimizer.backbone), ("head", self.optimizer.head)] {
            if !(g.lr >= 0.0 && g.weight_decay >= 0.0) || !g.lr.is_finite() {
                return bad(format!("optimizer.{name}: lr and weight_decay must be finite and >= 0"));
            }
        }
        if self.data.knn_k == 0 || self.data.knn_window % 2 == 0 {
            return bad("data.knn_k must be >= 1 and data.knn_window odd".into());
        }
        if self.data.synthetic && self.data.synthetic_scenes == 0 {
            return bad("data.synthetic_scenes must be >= 1".into());
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_optimizer_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.optimizer.backbone, GroupConfig { lr: 0.0004, weight_decay: 0.001 });
        assert_eq!(cfg.optimizer.head, GroupConfig { lr: 0.001, weight_decay: 0.0001 });
        assert!((cfg.schedule.warmup_fraction - 5.0 / 60.0).abs() < 1e-15);
        cfg.validate().unwrap();
        RunConfig::toy().validate().unwrap();
        RunConfig::toy().synthetic().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_partial_documents() {
        let cfg = RunConfig::toy();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml_str("seed = 9\n[schedule]\nepochs = 3\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.schedule.epochs, 3);
        assert_eq!(partial.model, ModelConfig::default());
    }

    #[test]
    fn parse_errors_name_line_and_field() {
        let err = RunConfig::from_toml_str("seed = 1\n[schedule]\nepoch = 3\n").unwrap_err().to_string();
        assert!(err.contains("epoch") && err.contains("line 3"), "{err}");
        let err = RunConfig::from_toml_str("[schedule]\nwarmup_fraction = 2.0\n").unwrap_err().to_string();
        assert!(err.contains("warmup_fraction"), "{err}");
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::toy()
            .with_overrides(&["optimizer.head.lr=0.5", "data.split=val", "data.root=/tmp/kitti", "seed=4"])
            .unwrap();
        assert_eq!(cfg.optimizer.head.lr, 0.5);
        assert_eq!(cfg.data.split, Split::Val);
        assert_eq!(cfg.data.root, Some(PathBuf::from("/tmp/kitti")));
        assert_eq!(cfg.seed, 4);
        assert!(RunConfig::toy().with_overrides(&["nonsense"]).is_err());
        assert!(RunConfig::toy().with_overrides(&["model.bogus=1"]).is_err());
    }
}

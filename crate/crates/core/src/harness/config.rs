//! Training configuration, read from TOML. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::edg::{DEFAULT_AU_THRESHOLD, DEFAULT_TOP_K};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tpf::{LossMode, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Fraction of all optimizer steps spent on the linear warmup.
    pub warmup_fraction: f64,
    pub loss: LossMode,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            warmup_fraction: 0.1,
            loss: LossMode::Mae,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TertileScope {
    #[default]
    Train,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgSettings {
    pub top_k: usize,
    pub au_threshold: f64,
    pub tertile_scope: TertileScope,
    /// Optional TOML lexicon override.
    pub lexicon: Option<PathBuf>,
}

impl Default for EdgSettings {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            au_threshold: DEFAULT_AU_THRESHOLD,
            tertile_scope: TertileScope::Train,
            lexicon: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub edg: EdgSettings,
}

impl TrainConfig {
    /// Larger width, batch and epoch count for full-size runs.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.model.d_model = 128;
        c.optim.batch_size = 64;
        c.optim.epochs = 80;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Parses `text` with every absent key taken from `base`.
    pub fn from_toml_str_over(base: &TrainConfig, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let c: TrainConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_file_over(&Self::default(), path)
    }

    pub fn from_toml_file_over(base: &TrainConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str_over(base, &text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if o.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a finite non-negative number".into()));
        }
        if !(0.0..=1.0).contains(&o.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer constants".into()));
        }
        let classify = matches!(self.model.task, Task::Classification { .. });
        if classify != (o.loss == LossMode::CrossEntropy) {
            return Err(Error::Config(
                "cross_entropy loss goes with classification and mae/mse with regression".into(),
            ));
        }
        if self.edg.top_k == 0 {
            return Err(Error::Config("edg.top_k must be at least 1".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "task" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

//! Experiment configuration: a sectioned TOML file whose every key has a
//! default, plus `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetFiles, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::RetrieverConfig;
use crate::losses::LossWeights;
use crate::lpf::{LpfConfig, LpfSettings};
use crate::model::ModelConfig;
use crate::nn::SgdConfig;
use crate::train::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Used when `source = "synthetic"`. Each repetition adds its seed to
    /// `synthetic.seed`, so repetitions see independent draws.
    pub synthetic: SynthSpec,
    /// Used when `source = "files"`.
    pub train: Option<DatasetFiles>,
    pub test: Option<DatasetFiles>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SynthSpec::default(),
            train: None,
            test: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub rho: f64,
    pub validation_fraction: f64,
    /// Number of classes withheld from the labeled data; 0 disables the
    /// open-set protocol.
    pub unseen_classes: usize,
    /// Out-of-class to in-class ratio of the unlabeled pool.
    pub kappa: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            validation_fraction: 0.2,
            unseen_classes: 0,
            kappa: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub center_lr_factor: f64,
    pub finetune_learning_rate: f64,
    pub finetune_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            decay_epoch: 100,
            decay_factor: 0.1,
            epochs: 200,
            patience: 20,
            batch_size: 32,
            center_lr_factor: 5.0,
            finetune_learning_rate: 1e-4,
            finetune_epochs: 20,
        }
    }
}

impl OptimConfig {
    pub fn initial_schedule(&self, seed: u64) -> Schedule {
        Schedule {
            sgd: SgdConfig {
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                max_epochs: self.epochs,
                seed,
            },
            decay_epoch: Some(self.decay_epoch),
            decay_factor: self.decay_factor,
            patience: (self.patience > 0).then_some(self.patience),
            center_lr_factor: self.center_lr_factor,
        }
    }

    pub fn finetune_schedule(&self, seed: u64) -> Schedule {
        Schedule {
            sgd: SgdConfig {
                learning_rate: self.finetune_learning_rate,
                batch_size: self.batch_size,
                max_epochs: self.finetune_epochs,
                seed,
            },
            decay_epoch: None,
            decay_factor: 1.0,
            patience: None,
            center_lr_factor: self.center_lr_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub modes: Vec<String>,
    pub repetitions: usize,
    pub seed: u64,
    pub map_r: usize,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            modes: vec!["f".into(), "l".into(), "ss".into()],
            repetitions: 5,
            seed: 0,
            map_r: 50,
            output: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub network: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub lpf: LpfConfig,
    pub retriever: RetrieverConfig,
    pub experiment: RunConfig,
}

impl ExperimentConfig {
    /// Parses `text` and applies `overrides` (each `section.key=value`,
    /// where the value is TOML or a bare string).
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise configuration: {e}")))
    }

    pub fn lpf_settings(&self, seed: u64) -> LpfSettings {
        LpfSettings {
            lpf: self.lpf.clone(),
            model: self.network,
            weights: self.loss,
            initial: self.optim.initial_schedule(seed),
            finetune: self.optim.finetune_schedule(seed),
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let run = &self.experiment;
        if run.repetitions == 0 {
            return Err(Error::Config("experiment.repetitions must be >= 1".into()));
        }
        if run.modes.is_empty() {
            return Err(Error::Config("experiment.modes must not be empty".into()));
        }
        if run.map_r == 0 {
            return Err(Error::Config("experiment.map_r must be >= 1".into()));
        }
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.validate()?,
            DataSource::Files => {
                if self.data.train.is_none() || self.data.test.is_none() {
                    return Err(Error::Config(
                        "data.source = \"files\" needs [data.train] and [data.test] paths".into(),
                    ));
                }
            }
        }
        let s = &self.split;
        if !(s.rho > 0.0 && s.rho <= 1.0) {
            return Err(Error::Config(format!("split.rho must lie in (0, 1], got {}", s.rho)));
        }
        if !(0.0..1.0).contains(&s.validation_fraction) || s.validation_fraction == 0.0 {
            return Err(Error::Config(format!(
                "split.validation_fraction must lie in (0, 1), got {}",
                s.validation_fraction
            )));
        }
        if !(s.kappa >= 0.0 && s.kappa.is_finite()) {
            return Err(Error::Config(format!("split.kappa must be >= 0, got {}", s.kappa)));
        }
        if s.kappa > 0.0 && s.unseen_classes == 0 {
            return Err(Error::Config("split.kappa > 0 requires split.unseen_classes >= 1".into()));
        }
        if self.data.source == DataSource::Synthetic && s.unseen_classes + 2 > self.data.synthetic.classes {
            return Err(Error::Config(format!(
                "split.unseen_classes = {} leaves fewer than 2 seen classes",
                s.unseen_classes
            )));
        }
        self.network.validate()?;
        self.loss.validate()?;
        self.lpf.validate()?;
        self.optim.initial_schedule(0).sgd.validate()?;
        self.optim.finetune_schedule(0).sgd.validate()?;
        if self.retriever.ridge <= 0.0 || !self.retriever.ridge.is_finite() {
            return Err(Error::Config(format!("retriever.ridge must be positive, got {}", self.retriever.ridge)));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form section.key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{spec}`")))?;
    let mut node = table;
    for k in keys {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{k}` in `{spec}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

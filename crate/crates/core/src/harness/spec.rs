use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationConfig;
use crate::error::{Error, Result};
use crate::netcore::TrainConfig;
use crate::scenarios::{default_suite, shuffled, Corruption};

/// Spec schema version understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// Synthetic source-data parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Layer widths, input first, class count last.
    pub dims: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSpec {
    DefaultSuite,
    List { items: Vec<Corruption> },
    Shuffled { seed: u64 },
}

impl ScenarioSpec {
    pub fn corruptions(&self) -> Vec<Corruption> {
        match self {
            ScenarioSpec::DefaultSuite => default_suite(),
            ScenarioSpec::List { items } => items.clone(),
            ScenarioSpec::Shuffled { seed } => shuffled(&default_suite(), *seed),
        }
    }
}

/// Known-complementary-label experiment.
///
/// Replicate `r` adds `r` to the source, model and training seeds, so
/// replicate 0 reproduces the plain source-training run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSpec {
    pub negatives: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub out_dir: PathBuf,
    pub source: SourceSpec,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub scenario: ScenarioSpec,
    pub adapt: Vec<AdaptationConfig>,
    pub demo: Option<DemoSpec>,
}

impl ExperimentSpec {
    /// Parses and validates a spec.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let dims = &self.model.dims;
        if dims.len() < 2 {
            return Err(Error::Config("model.dims needs an input and an output width".into()));
        }
        if dims[0] != self.source.dim {
            return Err(Error::Config(format!(
                "model input width {} does not match source.dim {}",
                dims[0], self.source.dim
            )));
        }
        if dims[dims.len() - 1] != self.source.classes {
            return Err(Error::Config(format!(
                "model output width {} does not match source.classes {}",
                dims[dims.len() - 1],
                self.source.classes
            )));
        }
        if self.training.batch_size < 2 || !(self.training.lr > 0.0 && self.training.lr.is_finite()) {
            return Err(Error::Config("training needs lr > 0 and batch_size >= 2".into()));
        }
        if self.adapt.is_empty() {
            return Err(Error::Config("at least one [[adapt]] entry is required".into()));
        }
        let mut ids = BTreeSet::new();
        for cfg in &self.adapt {
            if cfg.id.is_empty() || !ids.insert(cfg.id.as_str()) {
                return Err(Error::Config(format!("adapt id '{}' is empty or repeated", cfg.id)));
            }
            if cfg.id.contains([',', '"', '\n']) {
                return Err(Error::Config(format!(
                    "adapt id '{}' contains a reserved character",
                    cfg.id
                )));
            }
            cfg.validate()
                .map_err(|e| Error::Config(format!("adapt '{}': {e}", cfg.id)))?;
        }
        let scenario = self.scenario.corruptions();
        if scenario.is_empty() {
            return Err(Error::Config("scenario has no corruptions".into()));
        }
        for c in &scenario {
            c.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(demo) = &self.demo {
            if demo.negatives.is_empty() || demo.replicates == 0 {
                return Err(Error::Config("demo needs negatives and at least one replicate".into()));
            }
            if let Some(n) = demo.negatives.iter().find(|&&n| n == 0 || n >= self.source.classes) {
                return Err(Error::Config(format!(
                    "demo negative count {n} outside 1..={}",
                    self.source.classes - 1
                )));
            }
            if demo.batch_size < 2 || !(demo.lr > 0.0 && demo.lr.is_finite()) {
                return Err(Error::Config("demo needs lr > 0 and batch_size >= 2".into()));
            }
        }
        Ok(())
    }

    /// The spec with source, model and training seeds shifted by `offset`.
    pub fn reseeded(&self, offset: u64) -> ExperimentSpec {
        let mut s = self.clone();
        s.source.seed = s.source.seed.wrapping_add(offset);
        s.model.seed = s.model.seed.wrapping_add(offset);
        s.training.seed = s.training.seed.wrapping_add(offset);
        s
    }
}

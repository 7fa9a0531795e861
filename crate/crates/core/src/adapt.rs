//! Streaming test-time adaptation engine and the OAAT / continual protocols.
//!
//! Each batch goes through: train-stats forward, online prediction,
//! thresholds from the policy, complementary weights, loss, backward on the
//! selected parameter group, optimizer step, and finally a memory-bank refresh
//! with the pre-update predictions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{MemoryBank, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::labeling::{hard_complementary, pseudo_label, soft_complementary, ThresholdVector};
use crate::netcore::{Adam, AdamConfig, BnMode, MlpModel, ParamGroupSelector};
use crate::numerics::{softmax, Matrix, ProbMatrix};
use crate::risk::{bcl_loss_masked, ecl_risk, entropy_loss, npl_loss, LossResult};
use crate::scenarios::{make_stream, Corruption, Dataset};

/// Default number of batches drawn per corruption.
pub const DEFAULT_BATCHES: usize = 50;
/// Default adaptation batch size.
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Default adaptation learning rate.
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bcl,
    Ecl,
    Npl,
    Entropy,
    /// Batch-statistics forward only; no parameter update.
    None,
    /// Frozen source model with running statistics.
    Source,
}

impl LossKind {
    fn uses_thresholds(self) -> bool {
        matches!(self, LossKind::Bcl | LossKind::Ecl)
    }

    fn updates(self) -> bool {
        !matches!(self, LossKind::None | LossKind::Source)
    }
}

/// Which predictions feed the complementary weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    /// The adapting model's own pre-update predictions.
    #[default]
    Current,
    /// The original source parameters, normalized with the current batch.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Reset model, optimizer and bank before each corruption.
    Oaat,
    /// Carry all state across corruptions.
    Continual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub id: String,
    pub loss: LossKind,
    pub threshold_policy: ThresholdPolicy,
    #[serde(default)]
    pub weight_source: WeightSource,
    pub param_group: ParamGroupSelector,
    pub lr: f64,
    pub batch_size: usize,
    pub batches: usize,
    pub protocol: Protocol,
    pub seed: u64,
}

impl AdaptationConfig {
    /// Defaults for the given loss: dynamic thresholds, BN-only updates,
    /// learning rate 1e-3, 50 batches of 64.
    pub fn new(id: impl Into<String>, loss: LossKind, protocol: Protocol, seed: u64) -> Self {
        AdaptationConfig {
            id: id.into(),
            loss,
            threshold_policy: ThresholdPolicy::dynamic_default(),
            weight_source: WeightSource::Current,
            param_group: ParamGroupSelector::Bn,
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            batches: DEFAULT_BATCHES,
            protocol,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("adaptation batch size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batches == 0 {
            return Err(Error::invalid("need at least one batch per corruption"));
        }
        self.threshold_policy.validate()
    }
}

/// What one adaptation step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    /// Pre-update argmax predictions.
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub thresholds: Option<ThresholdVector>,
    pub loss: f64,
    /// `false` when no update ran (non-updating kinds, or ECL with `Σθ ≥ 1`).
    pub updated: bool,
}

/// Mutable state of one adaptation run.
#[derive(Clone, Debug)]
pub struct Engine {
    config: AdaptationConfig,
    source: MlpModel,
    model: MlpModel,
    optimizer: Adam,
    bank: MemoryBank,
    skipped: usize,
}

impl Engine {
    pub fn new(config: AdaptationConfig, model: MlpModel) -> Result<Self> {
        config.validate()?;
        let bank = MemoryBank::new(config.threshold_policy.capacity(), model.num_classes())?;
        Ok(Engine {
            optimizer: Adam::new(AdamConfig::with_lr(config.lr)),
            source: model.clone(),
            model,
            bank,
            config,
            skipped: 0,
        })
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.config
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn source(&self) -> &MlpModel {
        &self.source
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// Batches whose ECL update was skipped because the thresholds summed to ≥ 1.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Restores the source model and clears optimizer and bank.
    pub fn reset(&mut self) {
        self.model = self.source.clone();
        self.optimizer.reset();
        self.bank.clear();
    }

    /// One predict-then-update step. `truth` is used only for scoring.
    pub fn adapt_batch(&mut self, x: &Matrix, truth: &[usize]) -> Result<BatchOutcome> {
        if x.rows() != truth.len() {
            return Err(Error::shape("adapt_batch truth", x.rows(), truth.len()));
        }
        if x.rows() < 2 {
            return Err(Error::invalid("adaptation batches need at least 2 samples"));
        }
        let loss_kind = self.config.loss;
        if loss_kind == LossKind::Source {
            let probs = softmax(&self.model.predict(x)?);
            return Ok(self.outcome(&probs, truth, None, 0.0, false));
        }

        let (logits, cache) = self.model.forward(x, BnMode::TrainStats)?;
        self.model.absorb_batch_stats(&cache)?;
        let probs = softmax(&logits);
        if !loss_kind.updates() {
            return Ok(self.outcome(&probs, truth, None, 0.0, false));
        }

        let thresholds = if loss_kind.uses_thresholds() {
            Some(self.config.threshold_policy.thresholds(&self.bank, &probs)?)
        } else {
            None
        };

        let loss = match (loss_kind, &thresholds) {
            (LossKind::Bcl, Some(theta)) => {
                let basis = self.weight_basis(x, &probs)?;
                let flags = hard_complementary(&basis, theta)?;
                Some(bcl_loss_masked(&probs, &flags)?)
            }
            (LossKind::Ecl, Some(theta)) => {
                if theta.sum() >= 1.0 {
                    None
                } else {
                    let basis = self.weight_basis(x, &probs)?;
                    let w = soft_complementary(&basis, theta)?;
                    Some(ecl_risk(&w, &probs, theta)?)
                }
            }
            (LossKind::Npl, _) => Some(npl_loss(&probs)?),
            (LossKind::Entropy, _) => Some(entropy_loss(&probs)?),
            _ => unreachable!("threshold-based losses always carry thresholds"),
        };

        let (value, updated) = match loss {
            Some(LossResult { value, grad_logits, .. }) => {
                let grads = self.model.backward(&cache, &grad_logits, self.config.param_group)?;
                self.optimizer.step(&mut self.model, &grads)?;
                (value, true)
            }
            None => {
                self.skipped += 1;
                (0.0, false)
            }
        };
        if loss_kind.uses_thresholds() {
            self.bank.push_batch(&probs)?;
        }
        Ok(self.outcome(&probs, truth, thresholds, value, updated))
    }

    fn weight_basis(&self, x: &Matrix, current: &ProbMatrix) -> Result<ProbMatrix> {
        match self.config.weight_source {
            WeightSource::Current => Ok(current.clone()),
            WeightSource::Frozen => {
                let (logits, _) = self.source.forward(x, BnMode::TrainStats)?;
                Ok(softmax(&logits))
            }
        }
    }

    fn outcome(
        &self,
        probs: &ProbMatrix,
        truth: &[usize],
        thresholds: Option<ThresholdVector>,
        loss: f64,
        updated: bool,
    ) -> BatchOutcome {
        let predictions = pseudo_label(probs);
        let hits = predictions.iter().zip(truth).filter(|(a, b)| a == b).count();
        BatchOutcome {
            accuracy: hits as f64 / truth.len() as f64,
            predictions,
            thresholds,
            loss,
            updated,
        }
    }

    /// Runs every batch of one corruption stream.
    pub fn run_stream(&mut self, corruption: Corruption, stream: &Dataset) -> Result<CorruptionResult> {
        let bs = self.config.batch_size;
        let mut batch_accuracy = Vec::new();
        let mut thresholds = Vec::new();
        let skipped_before = self.skipped;
        let mut start = 0;
        while start + bs <= stream.len() {
            let idx: Vec<usize> = (start..start + bs).collect();
            let x = stream.features.select_rows(&idx);
            let out = self.adapt_batch(&x, &stream.labels[start..start + bs])?;
            batch_accuracy.push(out.accuracy);
            thresholds.push(out.thresholds.map(|t| t.as_slice().to_vec()));
            start += bs;
        }
        let n = batch_accuracy.len() as f64;
        let accuracy = batch_accuracy.iter().sum::<f64>() / n;
        let used: Vec<f64> = thresholds
            .iter()
            .flatten()
            .map(|t| t.iter().sum::<f64>() / t.len() as f64)
            .collect();
        let mean_threshold = (!used.is_empty()).then(|| used.iter().sum::<f64>() / used.len() as f64);
        Ok(CorruptionResult {
            corruption,
            accuracy,
            batches: batch_accuracy.len(),
            batch_accuracy,
            thresholds,
            mean_threshold,
            skipped: self.skipped - skipped_before,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionResult {
    pub corruption: Corruption,
    /// Mean of the per-batch pre-update accuracies.
    pub accuracy: f64,
    pub batches: usize,
    pub batch_accuracy: Vec<f64>,
    /// Per-batch thresholds (absent for losses that do not use them).
    pub thresholds: Vec<Option<Vec<f64>>>,
    pub mean_threshold: Option<f64>,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: AdaptationConfig,
    pub seed: u64,
    pub corruptions: Vec<CorruptionResult>,
    pub mean_accuracy: f64,
}

impl RunReport {
    pub fn accuracy_of(&self, c: Corruption) -> Option<f64> {
        self.corruptions.iter().find(|r| r.corruption == c).map(|r| r.accuracy)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.corruptions.last().map_or(0.0, |r| r.accuracy)
    }

    /// Flattened per-batch accuracy trace across the scenario.
    pub fn batch_trace(&self) -> Vec<f64> {
        self.corruptions
            .iter()
            .flat_map(|r| r.batch_accuracy.iter().copied())
            .collect()
    }
}

/// Runs a scenario and returns the report together with the final engine state.
pub fn run_scenario_with_engine(
    config: &AdaptationConfig,
    model: &MlpModel,
    scenario: &[Corruption],
    pool: &Dataset,
) -> Result<(RunReport, Engine)> {
    if scenario.is_empty() {
        return Err(Error::Empty("scenario"));
    }
    if pool.dim() != model.input_dim() {
        return Err(Error::shape("scenario pool width", model.input_dim(), pool.dim()));
    }
    let mut engine = Engine::new(config.clone(), model.clone())?;
    let mut corruptions = Vec::with_capacity(scenario.len());
    for &c in scenario {
        if config.protocol == Protocol::Oaat {
            engine.reset();
        }
        let stream = make_stream(pool, c, config.batches, config.batch_size, config.seed)?;
        corruptions.push(engine.run_stream(c, &stream)?);
    }
    let mean_accuracy = corruptions.iter().map(|r| r.accuracy).sum::<f64>() / corruptions.len() as f64;
    Ok((
        RunReport {
            config: config.clone(),
            seed: config.seed,
            corruptions,
            mean_accuracy,
        },
        engine,
    ))
}

/// Runs a scenario over streams drawn from `pool`.
pub fn run_scenario(
    config: &AdaptationConfig,
    model: &MlpModel,
    scenario: &[Corruption],
    pool: &Dataset,
) -> Result<RunReport> {
    run_scenario_with_engine(config, model, scenario, pool).map(|(r, _)| r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub config_id: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Reports ordered by config, then seed.
    pub reports: Vec<RunReport>,
}

impl Comparison {
    pub fn row(&self, id: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.config_id == id)
    }
}

/// Runs every `(config, seed)` pair (in parallel) and aggregates mean ± sd per config.
/// Each config's `seed` is replaced by the pair's seed.
pub fn compare_runs(
    configs: &[AdaptationConfig],
    model: &MlpModel,
    scenario: &[Corruption],
    pool: &Dataset,
    seeds: &[u64],
) -> Result<Comparison> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("comparison configs or seeds"));
    }
    let jobs: Vec<AdaptationConfig> = configs
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| AdaptationConfig { seed: s, ..c.clone() }))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|c| run_scenario(c, model, scenario, pool))
        .collect::<Result<Vec<_>>>()?;
    let rows = configs
        .iter()
        .zip(reports.chunks(seeds.len()))
        .map(|(c, chunk)| {
            let per_seed: Vec<f64> = chunk.iter().map(|r| r.mean_accuracy).collect();
            let (mean, sd) = mean_sd(&per_seed);
            ComparisonRow {
                config_id: c.id.clone(),
                seeds: seeds.to_vec(),
                per_seed,
                mean,
                sd,
            }
        })
        .collect();
    Ok(Comparison { rows, reports })
}

/// Mean and population standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

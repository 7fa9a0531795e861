use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, MlpModel, ParamGroupSelector};
use crate::error::{Error, Result};
use crate::labeling::{pseudo_label, HardClMatrix};
use crate::numerics::{mix_seed, softmax, SeededRng};
use crate::risk::{bcl_loss_masked, cross_entropy};
use crate::scenarios::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownClConfig {
    pub n_negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Accuracy of running-stats predictions.
pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    let probs = softmax(&model.predict(&data.features)?);
    let hits = pseudo_label(&probs)
        .iter()
        .zip(&data.labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

fn check_dataset(model: &MlpModel, data: &Dataset) -> Result<()> {
    if data.dim() != model.input_dim() {
        return Err(Error::shape("dataset width", model.input_dim(), data.dim()));
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

fn check_hyper(epochs_lr: f64, batch_size: usize) -> Result<()> {
    if !(epochs_lr > 0.0 && epochs_lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {epochs_lr} must be positive")));
    }
    if batch_size < 2 {
        return Err(Error::invalid("batch size must be at least 2 for batch statistics"));
    }
    Ok(())
}

/// Shuffled mini-batches over `n` samples; a trailing batch smaller than 2 is dropped.
fn batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Supervised cross-entropy training of every parameter group.
pub fn train_source(
    model: &mut MlpModel,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    check_dataset(model, train)?;
    if let Some(t) = test {
        check_dataset(model, t)?;
    }
    check_hyper(cfg.lr, cfg.batch_size)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = SeededRng::new(cfg.seed);
    for _ in 0..cfg.epochs {
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            let x = train.features.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (logits, cache) = model.forward_train(&x)?;
            let loss = cross_entropy(&softmax(&logits), &y)?;
            let grads = model.backward(&cache, &loss.grad_logits, ParamGroupSelector::All)?;
            opt.step(model, &grads)?;
        }
    }
    Ok(TrainSummary {
        train_accuracy: accuracy(model, train)?,
        test_accuracy: test.map(|t| accuracy(model, t)).transpose()?,
    })
}

/// Draws, once, `n_negatives` distinct non-true categories per sample.
pub fn draw_known_negatives(
    labels: &[usize],
    classes: usize,
    n_negatives: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_negatives == 0 || n_negatives >= classes {
        return Err(Error::invalid(format!(
            "n_negatives {n_negatives} outside 1..={}",
            classes - 1
        )));
    }
    let mut rng = SeededRng::new(seed);
    labels
        .iter()
        .map(|&y| {
            if y >= classes {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            let mut others: Vec<usize> = (0..classes).filter(|&c| c != y).collect();
            let (chosen, _) = others.partial_shuffle(&mut rng, n_negatives);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            Ok(chosen)
        })
        .collect()
}

/// Trains from known, fixed complementary labels with the basic complementary loss.
pub fn train_with_known_cl(
    model: &mut MlpModel,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &KnownClConfig,
) -> Result<TrainSummary> {
    check_dataset(model, train)?;
    if let Some(t) = test {
        check_dataset(model, t)?;
    }
    check_hyper(cfg.lr, cfg.batch_size)?;
    let classes = model.num_classes();
    let negatives = draw_known_negatives(&train.labels, classes, cfg.n_negatives, mix_seed(cfg.seed, 1))?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = SeededRng::new(cfg.seed);
    for _ in 0..cfg.epochs {
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            let x = train.features.select_rows(&idx);
            let mut flags = vec![false; idx.len() * classes];
            for (r, &i) in idx.iter().enumerate() {
                for &c in &negatives[i] {
                    flags[r * classes + c] = true;
                }
            }
            let flags = HardClMatrix::from_flags(idx.len(), classes, flags)?;
            let (logits, cache) = model.forward_train(&x)?;
            let loss = bcl_loss_masked(&softmax(&logits), &flags)?;
            let grads = model.backward(&cache, &loss.grad_logits, ParamGroupSelector::All)?;
            opt.step(model, &grads)?;
        }
    }
    Ok(TrainSummary {
        train_accuracy: accuracy(model, train)?,
        test_accuracy: test.map(|t| accuracy(model, t)).transpose()?,
    })
}

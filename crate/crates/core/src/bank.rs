//! Memory bank of recent prediction rows and the thresholding policies built on it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::ThresholdVector;
use crate::numerics::{percentile, ProbMatrix, ROW_SUM_TOL};

/// Default bank capacity.
pub const DEFAULT_CAPACITY: usize = 200;
/// Default percentile rank.
pub const DEFAULT_PERCENTILE: f64 = 75.0;
/// Default fixed threshold for 10-class problems.
pub const FIXED_THRESHOLD_10: f64 = 5e-2;
/// Default fixed threshold for 100-class problems.
pub const FIXED_THRESHOLD_100: f64 = 5e-3;

/// Bounded FIFO of prediction rows, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    classes: usize,
    rows: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, classes: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("memory bank capacity must be positive"));
        }
        if classes == 0 {
            return Err(Error::invalid("memory bank needs at least one class"));
        }
        Ok(MemoryBank {
            capacity,
            classes,
            rows: VecDeque::with_capacity(capacity),
        })
    }

    /// Rebuilds a bank from stored rows (checkpoint loading). Rows beyond
    /// the capacity are evicted oldest first.
    pub fn from_rows(capacity: usize, classes: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut bank = Self::new(capacity, classes)?;
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != classes {
                return Err(Error::shape("memory bank row", classes, row.len()));
            }
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("memory bank row {i} is not a probability row")));
            }
            bank.rows.push_back(row);
        }
        bank.evict();
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(Vec::as_slice)
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    /// Appends the batch rows in order, then drops the oldest rows beyond capacity.
    pub fn push_batch(&mut self, probs: &ProbMatrix) -> Result<()> {
        if probs.rows() == 0 {
            return Ok(());
        }
        if probs.cols() != self.classes {
            return Err(Error::shape("memory bank push", self.classes, probs.cols()));
        }
        for row in probs.row_iter() {
            self.rows.push_back(row.to_vec());
        }
        self.evict();
        Ok(())
    }

    fn evict(&mut self) {
        while self.rows.len() > self.capacity {
            self.rows.pop_front();
        }
    }

    /// Per-category percentile of the stored rows.
    pub fn thresholds(&self, t: f64) -> Result<ThresholdVector> {
        if self.rows.is_empty() {
            return Err(Error::Empty("memory bank"));
        }
        let rows: Vec<&[f64]> = self.rows().collect();
        column_percentiles(&rows, self.classes, t)
    }
}

fn column_percentiles(rows: &[&[f64]], classes: usize, t: f64) -> Result<ThresholdVector> {
    let mut theta = Vec::with_capacity(classes);
    for c in 0..classes {
        let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        theta.push(percentile(&col, t)?);
    }
    clamp_below_one(theta)
}

// A percentile over probability rows can reach exactly 1.0 when every stored
// row is one-hot on a class; thresholds must stay in [0, 1).
fn clamp_below_one(mut theta: Vec<f64>) -> Result<ThresholdVector> {
    for v in theta.iter_mut() {
        if *v >= 1.0 {
            *v = 1.0 - f64::EPSILON;
        }
    }
    ThresholdVector::new(theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ThresholdPolicy {
    /// Percentile `t` of a bank holding at most `capacity` rows.
    Dynamic { percentile: f64, capacity: usize },
    /// Same threshold for every category, constant over time.
    Fixed { theta: f64 },
}

impl ThresholdPolicy {
    pub fn dynamic_default() -> Self {
        ThresholdPolicy::Dynamic {
            percentile: DEFAULT_PERCENTILE,
            capacity: DEFAULT_CAPACITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::Dynamic { percentile, capacity } => {
                if !(0.0..=100.0).contains(&percentile) {
                    return Err(Error::invalid(format!("percentile {percentile} outside [0, 100]")));
                }
                if capacity == 0 {
                    return Err(Error::invalid("bank capacity must be positive"));
                }
            }
            ThresholdPolicy::Fixed { theta } => {
                if !(0.0..1.0).contains(&theta) {
                    return Err(Error::invalid(format!("fixed threshold {theta} outside [0, 1)")));
                }
            }
        }
        Ok(())
    }

    /// Bank capacity this policy wants (fixed policies keep a default-sized bank).
    pub fn capacity(&self) -> usize {
        match *self {
            ThresholdPolicy::Dynamic { capacity, .. } => capacity,
            ThresholdPolicy::Fixed { .. } => DEFAULT_CAPACITY,
        }
    }

    /// Thresholds for the current batch.
    ///
    /// Fixed policies ignore both arguments. Dynamic policies read only the
    /// bank when it holds rows; on a cold start they use the current batch.
    pub fn thresholds(&self, bank: &MemoryBank, current: &ProbMatrix) -> Result<ThresholdVector> {
        match *self {
            ThresholdPolicy::Fixed { theta } => ThresholdVector::uniform(theta, current.cols()),
            ThresholdPolicy::Dynamic { percentile, .. } => {
                if !bank.is_empty() {
                    bank.thresholds(percentile)
                } else if current.rows() > 0 {
                    let rows: Vec<&[f64]> = current.row_iter().collect();
                    column_percentiles(&rows, current.cols(), percentile)
                } else {
                    Err(Error::Empty("cold-start batch for dynamic thresholds"))
                }
            }
        }
    }
}

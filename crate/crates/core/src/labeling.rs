//! Pseudo labels, hard and soft complementary labels, and their accuracy.
//!
//! A category `c` is a *complementary* (negative) label for a sample when
//! the predicted probability falls strictly below that category's threshold,
//! `f(x)_c < θ_c`. The soft variant weights each negative category by how far
//! below the threshold it sits, `[θ_c − f(x)_c]_+ / θ_c`.

use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix, ProbMatrix};

/// Per-category thresholds, each in `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if let Some((c, t)) = theta.iter().enumerate().find(|(_, t)| !(0.0..1.0).contains(*t)) {
            return Err(Error::invalid(format!("threshold {c} = {t} outside [0, 1)")));
        }
        Ok(ThresholdVector(theta))
    }

    pub fn uniform(value: f64, classes: usize) -> Result<Self> {
        Self::new(vec![value; classes])
    }

    pub fn zeros(classes: usize) -> Self {
        ThresholdVector(vec![0.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Largest threshold over categories.
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.sum() / self.0.len() as f64
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&t| t == 0.0)
    }
}

/// Binary N×C flags; `true` marks a negative category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardClMatrix {
    rows: usize,
    cols: usize,
    flags: Vec<bool>,
}

impl HardClMatrix {
    pub fn from_flags(rows: usize, cols: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != rows * cols {
            return Err(Error::shape("HardClMatrix", rows * cols, flags.len()));
        }
        Ok(HardClMatrix { rows, cols, flags })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.flags[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.flags[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Soft complementary weights; the alias documents intent at call sites.
pub type SoftClMatrix = Matrix;

fn check_classes(probs: &ProbMatrix, theta: &ThresholdVector) -> Result<()> {
    if probs.cols() != theta.len() {
        return Err(Error::shape("threshold length", probs.cols(), theta.len()));
    }
    Ok(())
}

/// Argmax per row, ties to the lowest index.
pub fn pseudo_label(probs: &ProbMatrix) -> Vec<usize> {
    probs.row_iter().map(argmax).collect()
}

/// `flag(i, c) = probs(i, c) < θ_c`.
pub fn hard_complementary(probs: &ProbMatrix, theta: &ThresholdVector) -> Result<HardClMatrix> {
    check_classes(probs, theta)?;
    let t = theta.as_slice();
    let flags = probs
        .row_iter()
        .flat_map(|row| row.iter().zip(t).map(|(&p, &th)| p < th))
        .collect();
    HardClMatrix::from_flags(probs.rows(), probs.cols(), flags)
}

/// `w(i, j) = max(θ_j − probs(i, j), 0) / θ_j`, with categories at `θ_j = 0` exempt.
pub fn soft_complementary(probs: &ProbMatrix, theta: &ThresholdVector) -> Result<SoftClMatrix> {
    check_classes(probs, theta)?;
    let t = theta.as_slice();
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for (r, row) in probs.row_iter().enumerate() {
        for (c, (&p, &th)) in row.iter().zip(t).enumerate() {
            if th > 0.0 && p < th {
                out.set(r, c, (th - p) / th);
            }
        }
    }
    Ok(out)
}

/// Fraction of samples whose true class is not flagged. Rows with no flags count as correct.
pub fn cl_correctness(flags: &HardClMatrix, truth: &[usize]) -> Result<f64> {
    if flags.rows() != truth.len() {
        return Err(Error::shape("cl_correctness truth", flags.rows(), truth.len()));
    }
    if truth.is_empty() {
        return Err(Error::Empty("cl_correctness batch"));
    }
    let mut correct = 0usize;
    for (i, &y) in truth.iter().enumerate() {
        if y >= flags.cols() {
            return Err(Error::invalid(format!(
                "truth label {y} out of range for {} classes",
                flags.cols()
            )));
        }
        if !flags.get(i, y) {
            correct += 1;
        }
    }
    Ok(correct as f64 / truth.len() as f64)
}

/// Exact-match fraction.
pub fn pl_accuracy(pseudo: &[usize], truth: &[usize]) -> Result<f64> {
    if pseudo.len() != truth.len() {
        return Err(Error::shape("pl_accuracy", truth.len(), pseudo.len()));
    }
    if truth.is_empty() {
        return Err(Error::Empty("pl_accuracy batch"));
    }
    let hits = pseudo.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Lower bound on complementary-label correctness, `(1 − Θ)^(C−1)`.
pub fn cl_bound(theta_max: f64, classes: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&theta_max) {
        return Err(Error::invalid(format!("theta_max {theta_max} outside [0, 1)")));
    }
    if classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    Ok((1.0 - theta_max).powi(classes as i32 - 1))
}

/// Largest threshold for which the bound still beats pseudo-label accuracy `f_max`:
/// `1 − f_max^(1/(C−1))`.
pub fn threshold_crossover(f_max: f64, classes: usize) -> Result<f64> {
    if !(f_max > 0.0 && f_max < 1.0) {
        return Err(Error::invalid(format!("f_max {f_max} outside (0, 1)")));
    }
    if classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    Ok(1.0 - f_max.powf(1.0 / (classes - 1) as f64))
}

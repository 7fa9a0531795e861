//! Loss and risk functions over prediction matrices.
//!
//! Each loss returns its value together with the gradient with respect to
//! the probabilities and, through the softmax Jacobian, the logits. All logs
//! are natural logs of probabilities clamped at [`LOG_EPS`].

use crate::error::{Error, Result};
use crate::labeling::{hard_complementary, HardClMatrix, ThresholdVector};
use crate::numerics::{clamped_log, clamped_log_deriv, Matrix, ProbMatrix, LOG_EPS};

/// `|1 − Σθ|` below this is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-9;

/// Unclipped complementary label matrix; entries may be negative.
pub type SignedLabelMatrix = Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_probs: Matrix,
    pub grad_logits: Matrix,
}

impl LossResult {
    fn zero(rows: usize, cols: usize) -> Self {
        LossResult {
            value: 0.0,
            grad_probs: Matrix::zeros(rows, cols),
            grad_logits: Matrix::zeros(rows, cols),
        }
    }

    fn from_probs_grad(value: f64, grad_probs: Matrix, probs: &ProbMatrix) -> Self {
        let grad_logits = softmax_backward(probs, &grad_probs);
        LossResult {
            value,
            grad_probs,
            grad_logits,
        }
    }
}

/// Pulls a probability-space gradient back to logits:
/// `dz_j = f_j (g_j − Σ_k f_k g_k)`.
pub fn softmax_backward(probs: &ProbMatrix, grad_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for (r, f) in probs.row_iter().enumerate() {
        let g = grad_probs.row(r);
        let dot: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (fj, gj)) in out.row_mut(r).iter_mut().zip(f.iter().zip(g)) {
            *o = fj * (gj - dot);
        }
    }
    out
}

fn check_same_shape(ctx: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(
            ctx,
            format!("{}x{}", a.0, a.1),
            format!("{}x{}", b.0, b.1),
        ));
    }
    Ok(())
}

/// Basic complementary loss with flags from `probs < θ`.
pub fn bcl_loss(probs: &ProbMatrix, theta: &ThresholdVector) -> Result<LossResult> {
    let flags = hard_complementary(probs, theta)?;
    bcl_loss_masked(probs, &flags)
}

/// Basic complementary loss over an explicit flag set:
/// `L = −1/(N·C) Σ_flagged p ln p` with `p = 1 − f`.
pub fn bcl_loss_masked(probs: &ProbMatrix, flags: &HardClMatrix) -> Result<LossResult> {
    check_same_shape("bcl flags", (probs.rows(), probs.cols()), (flags.rows(), flags.cols()))?;
    let (n, c) = (probs.rows(), probs.cols());
    let scale = 1.0 / (n * c) as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for (r, row) in probs.row_iter().enumerate() {
        for (j, &f) in row.iter().enumerate() {
            if !flags.get(r, j) {
                continue;
            }
            let p = 1.0 - f;
            value -= p * clamped_log(p, LOG_EPS);
            // d/dp [p ln max(p, eps)]
            let dp = clamped_log(p, LOG_EPS) + if p >= LOG_EPS { 1.0 } else { 0.0 };
            grad.set(r, j, scale * dp);
        }
    }
    Ok(LossResult::from_probs_grad(value * scale, grad, probs))
}

/// Affine map from ordinary labels to unclipped complementary labels:
/// `η̄_c = (θ_c Σ_j p̂_j − p̂_c) / θ_c`.
pub fn complementary_transform(ordinary: &Matrix, theta: &ThresholdVector) -> Result<SignedLabelMatrix> {
    if ordinary.cols() != theta.len() {
        return Err(Error::shape("complementary_transform", theta.len(), ordinary.cols()));
    }
    if let Some(c) = theta.as_slice().iter().position(|&t| t <= 0.0) {
        return Err(Error::invalid(format!(
            "threshold {c} must be positive for the transform"
        )));
    }
    let t = theta.as_slice();
    let mut out = Matrix::zeros(ordinary.rows(), ordinary.cols());
    for (r, row) in ordinary.row_iter().enumerate() {
        let total: f64 = row.iter().sum();
        for (o, (&p, &th)) in out.row_mut(r).iter_mut().zip(row.iter().zip(t)) {
            *o = (th * total - p) / th;
        }
    }
    Ok(out)
}

/// Inverse of [`complementary_transform`] via the rank-one (Sherman–Morrison) form
/// `p̂ = −Θ η̄ − θ (θᵀ η̄) / (1 − Σθ)`.
pub fn inverse_transform(signed: &SignedLabelMatrix, theta: &ThresholdVector) -> Result<Matrix> {
    if signed.cols() != theta.len() {
        return Err(Error::shape("inverse_transform", theta.len(), signed.cols()));
    }
    if let Some(c) = theta.as_slice().iter().position(|&t| t <= 0.0) {
        return Err(Error::invalid(format!(
            "threshold {c} must be positive for the transform"
        )));
    }
    let gap = 1.0 - theta.sum();
    if gap.abs() < SINGULAR_TOL {
        return Err(Error::Singular { gap: gap.abs() });
    }
    let t = theta.as_slice();
    let mut out = Matrix::zeros(signed.rows(), signed.cols());
    for (r, row) in signed.row_iter().enumerate() {
        let proj: f64 = row.iter().zip(t).map(|(e, th)| e * th).sum();
        let k = proj / gap;
        for (o, (&e, &th)) in out.row_mut(r).iter_mut().zip(row.iter().zip(t)) {
            *o = -th * e - th * k;
        }
    }
    Ok(out)
}

/// Enhanced complementary risk.
///
/// `R = 1/N Σ_i [ Σ_y w_iy θ_y ln f_iy + (Σ_y θ_y w_iy)(Σ_j θ_j ln f_ij) / (1 − Σθ) ]`
///
/// With `w` equal to the unclipped transform of some `p̂`, this equals
/// [`ordinary_risk`]`(p̂, f)` exactly. With clipped non-negative weights the
/// gradient on every flagged category is positive, so descent suppresses
/// the negative categories. An all-zero `θ` yields zero risk.
pub fn ecl_risk(weights: &Matrix, probs_test: &ProbMatrix, theta: &ThresholdVector) -> Result<LossResult> {
    check_same_shape("ecl weights", (probs_test.rows(), probs_test.cols()), weights.shape())?;
    if theta.len() != probs_test.cols() {
        return Err(Error::shape("ecl thresholds", probs_test.cols(), theta.len()));
    }
    let (n, c) = (probs_test.rows(), probs_test.cols());
    if theta.is_zero() {
        return Ok(LossResult::zero(n, c));
    }
    let sum = theta.sum();
    if sum >= 1.0 {
        return Err(Error::ThresholdSum { sum });
    }
    let k = 1.0 / (1.0 - sum);
    let t = theta.as_slice();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for (r, f) in probs_test.row_iter().enumerate() {
        let w = weights.row(r);
        let mass: f64 = w.iter().zip(t).map(|(a, b)| a * b).sum();
        let mut direct = 0.0;
        let mut spread = 0.0;
        for j in 0..c {
            let l = clamped_log(f[j], LOG_EPS);
            direct += w[j] * t[j] * l;
            spread += t[j] * l;
        }
        value += direct + k * mass * spread;
        let g = grad.row_mut(r);
        for j in 0..c {
            g[j] = inv_n * (w[j] * t[j] + k * mass * t[j]) * clamped_log_deriv(f[j], LOG_EPS);
        }
    }
    Ok(LossResult::from_probs_grad(value * inv_n, grad, probs_test))
}

/// `1/N Σ_i Σ_y labels(i, y) · (−ln f(i, y))`. Labels may be soft or signed.
pub fn ordinary_risk(labels: &Matrix, probs: &ProbMatrix) -> Result<f64> {
    check_same_shape("ordinary_risk", (probs.rows(), probs.cols()), labels.shape())?;
    if probs.rows() == 0 {
        return Err(Error::Empty("ordinary_risk batch"));
    }
    let total: f64 = labels
        .row_iter()
        .zip(probs.row_iter())
        .map(|(y, f)| {
            y.iter()
                .zip(f)
                .map(|(&yv, &fv)| -yv * clamped_log(fv, LOG_EPS))
                .sum::<f64>()
        })
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Mean cross-entropy against fixed hard labels.
pub fn cross_entropy(probs: &ProbMatrix, labels: &[usize]) -> Result<LossResult> {
    if labels.len() != probs.rows() {
        return Err(Error::shape("cross_entropy labels", probs.rows(), labels.len()));
    }
    let (n, c) = (probs.rows(), probs.cols());
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        let f = probs.get(r, y);
        value -= clamped_log(f, LOG_EPS);
        grad.set(r, y, -inv_n * clamped_log_deriv(f, LOG_EPS));
    }
    Ok(LossResult::from_probs_grad(value * inv_n, grad, probs))
}

/// Naive pseudo-labeling: cross-entropy against each row's own argmax,
/// treated as a constant target.
pub fn npl_loss(probs: &ProbMatrix) -> Result<LossResult> {
    let pseudo = crate::labeling::pseudo_label(probs);
    cross_entropy(probs, &pseudo)
}

/// Mean Shannon entropy of the rows.
pub fn entropy_loss(probs: &ProbMatrix) -> Result<LossResult> {
    let (n, c) = (probs.rows(), probs.cols());
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for (r, f) in probs.row_iter().enumerate() {
        for (j, &p) in f.iter().enumerate() {
            let l = clamped_log(p, LOG_EPS);
            value -= p * l;
            let d = l + if p >= LOG_EPS { 1.0 } else { 0.0 };
            grad.set(r, j, -inv_n * d);
        }
    }
    Ok(LossResult::from_probs_grad(value * inv_n, grad, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::soft_complementary;

    fn probs(rows: &[&[f64]]) -> ProbMatrix {
        ProbMatrix::from_rows(rows).unwrap()
    }

    fn theta(v: &[f64]) -> ThresholdVector {
        ThresholdVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn bcl_single_flag() {
        let p = probs(&[&[0.7, 0.2, 0.1]]);
        let r = bcl_loss(&p, &theta(&[0.15, 0.15, 0.15])).unwrap();
        let expected = -(0.9f64 * 0.9f64.ln()) / 3.0;
        assert!((r.value - expected).abs() < 1e-15);
        assert!((r.value - 0.031_608_155).abs() < 1e-9);
        let g = (0.9f64.ln() + 1.0) / 3.0;
        assert!((r.grad_probs.get(0, 2) - g).abs() < 1e-15);
        assert!((r.grad_probs.get(0, 2) - 0.298_213_161).abs() < 1e-9);
        assert_eq!(r.grad_probs.get(0, 0), 0.0);
    }

    #[test]
    fn bcl_no_flags_is_zero() {
        let p = probs(&[&[0.7, 0.2, 0.1]]);
        let r = bcl_loss(&p, &ThresholdVector::zeros(3)).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transform_examples() {
        let p = Matrix::from_rows(&[[0.8, 0.2]]).unwrap();
        let t = theta(&[0.4, 0.4]);
        let eta = complementary_transform(&p, &t).unwrap();
        assert!((eta.get(0, 0) + 1.0).abs() < 1e-15);
        assert!((eta.get(0, 1) - 0.5).abs() < 1e-15);
        let back = inverse_transform(&eta, &t).unwrap();
        assert!((back.get(0, 0) - 0.8).abs() < 1e-15);
        assert!((back.get(0, 1) - 0.2).abs() < 1e-15);

        // fixed point needs sum(theta) = 1
        let t = theta(&[0.3, 0.7]);
        let p = Matrix::from_rows(&[[0.3, 0.7]]).unwrap();
        let eta = complementary_transform(&p, &t).unwrap();
        assert!(eta.as_slice().iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(inverse_transform(&eta, &t), Err(Error::Singular { .. })));

        assert!(complementary_transform(&p, &theta(&[0.0, 0.5])).is_err());
    }

    #[test]
    fn transform_sign_analysis() {
        let p = Matrix::from_rows(&[[0.05, 0.15, 0.8]]).unwrap();
        let eta = complementary_transform(&p, &theta(&[0.1, 0.1, 0.1])).unwrap();
        assert!(eta.get(0, 0) > 0.0);
        assert!(eta.get(0, 1) < 0.0);
        assert!(eta.get(0, 2) < 0.0);
    }

    #[test]
    fn ecl_term_by_term() {
        let src = probs(&[&[0.7, 0.25, 0.05]]);
        let t = theta(&[0.2, 0.2, 0.2]);
        let w = soft_complementary(&src, &t).unwrap();
        let test = probs(&[&[0.6, 0.3, 0.1]]);
        let r = ecl_risk(&w, &test, &t).unwrap();
        let (l0, l1, l2) = (0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln());
        let expected = 0.75 * 0.2 * l2 + 2.5 * (0.2 * 0.75) * (0.2 * (l0 + l1 + l2));
        assert!((r.value - expected).abs() < 1e-14);
        assert!((r.value - -0.646692).abs() < 1e-6);
        assert!(r.grad_probs.get(0, 2) > 0.0);
    }

    #[test]
    fn ecl_zero_weights_and_zero_theta() {
        let test = probs(&[&[0.6, 0.3, 0.1]]);
        let t = theta(&[0.2, 0.2, 0.2]);
        let r = ecl_risk(&Matrix::zeros(1, 3), &test, &t).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_logits.as_slice().iter().all(|&v| v == 0.0));
        let r = ecl_risk(&Matrix::zeros(1, 3), &test, &ThresholdVector::zeros(3)).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn ecl_rejects_large_threshold_sum() {
        let test = probs(&[&[0.6, 0.4]]);
        let r = ecl_risk(&Matrix::zeros(1, 2), &test, &theta(&[0.5, 0.5]));
        assert!(matches!(r, Err(Error::ThresholdSum { .. })));
    }

    #[test]
    fn ecl_matches_ordinary_risk_on_worked_example() {
        let p_hat = Matrix::from_rows(&[[0.8, 0.2]]).unwrap();
        let t = theta(&[0.4, 0.4]);
        let eta = complementary_transform(&p_hat, &t).unwrap();
        let test = probs(&[&[0.6, 0.4]]);
        let r = ecl_risk(&eta, &test, &t).unwrap();
        let ord = ordinary_risk(&p_hat, &test).unwrap();
        assert!((ord - 0.591_918_645).abs() < 1e-9);
        assert!((r.value - ord).abs() < 1e-14);
    }

    #[test]
    fn ordinary_risk_examples() {
        let one_hot = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(ordinary_risk(&one_hot, &probs(&[&[1.0 - 1e-9, 1e-9]])).unwrap() < 1e-8);
        let uni = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let r = ordinary_risk(&uni, &probs(&[&[0.5, 0.5]])).unwrap();
        assert!((r - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn npl_examples() {
        let r = npl_loss(&probs(&[&[0.7, 0.2, 0.1]])).unwrap();
        assert!((r.value - 0.356675).abs() < 1e-6);
        let r = npl_loss(&probs(&[&[0.0, 1.0, 0.0]])).unwrap();
        assert_eq!(r.value, 0.0);
        let r = npl_loss(&probs(&[&[0.25; 4]])).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-15);
        assert!(r.grad_probs.get(0, 0) < 0.0);
        assert_eq!(r.grad_probs.get(0, 1), 0.0);
    }

    #[test]
    fn entropy_examples() {
        let r = entropy_loss(&probs(&[&[1.0 / 3.0; 3]])).unwrap();
        assert!((r.value - 3f64.ln()).abs() < 1e-15);
        let r = entropy_loss(&probs(&[&[0.7, 0.2, 0.1]])).unwrap();
        assert!((r.value - 0.801819).abs() < 1e-6);
        let r = entropy_loss(&probs(&[&[0.0, 1.0, 0.0]])).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(cross_entropy(&probs(&[&[0.5, 0.5]]), &[2]).is_err());
    }
}

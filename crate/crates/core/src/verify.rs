//! Oracle suites behind the `verify` command.
//!
//! Every check compares library output against an independent computation:
//! a term-by-term cross-entropy, Gaussian elimination, central finite
//! differences, a naive insertion-sort percentile, or an empirical frequency.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::labeling::{
    cl_bound, cl_correctness, hard_complementary, pl_accuracy, pseudo_label, soft_complementary, threshold_crossover,
    ThresholdVector,
};
use crate::netcore::{BnMode, MlpModel, ParamGroupSelector};
use crate::numerics::{percentile, softmax, LogitMatrix, Matrix, ProbMatrix, SeededRng};
use crate::risk::{
    bcl_loss, complementary_transform, cross_entropy, ecl_risk, entropy_loss, inverse_transform, npl_loss, LossResult,
};

pub const RISK_TOL: f64 = 1e-8;
pub const ROUND_TRIP_TOL: f64 = 1e-10;
pub const FD_STEP: f64 = 1e-5;
pub const LOGIT_GRAD_TOL: f64 = 1e-5;
pub const MODEL_GRAD_TOL: f64 = 1e-4;
pub const BOUND_SAMPLES: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fast,
    Full,
}

impl std::str::FromStr for Level {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(crate::Error::invalid(format!("unknown verify level {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Headline number of the check (largest error, mismatch count, or empirical rate).
    pub metric: f64,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<22} {} ({:.2}s)", self.name, self.detail, self.seconds)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<(bool, f64, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, metric, detail) = body().unwrap_or_else(|e| (false, f64::NAN, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        metric,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every oracle suite; `Fast` skips the large-sample bound check.
pub fn run(level: Level, seed: u64) -> VerifyReport {
    let mut checks = vec![
        risk_equivalence(100, seed, &|w, f, t| ecl_risk(w, f, t).map(|r| r.value)),
        round_trip(1000, seed),
        logit_gradients(20, seed),
        model_gradients(seed),
        percentile_oracle(1000, seed),
    ];
    if level == Level::Full {
        checks.push(cl_bound_check(BOUND_SAMPLES, seed));
    }
    VerifyReport { checks }
}

/// Signature of a risk under test: `(weights, probs, θ) -> value`.
pub type RiskFn = dyn Fn(&Matrix, &ProbMatrix, &ThresholdVector) -> Result<f64> + Sync;

fn random_logits(rng: &mut SeededRng, n: usize, c: usize, scale: f64) -> LogitMatrix {
    let data = (0..n * c)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    LogitMatrix::new(Matrix::from_vec(n, c, data).expect("sized")).expect("finite")
}

fn random_probs(rng: &mut SeededRng, n: usize, c: usize) -> ProbMatrix {
    softmax(&random_logits(rng, n, c, 1.5))
}

/// θ_c in (0.05, 0.3) with Σθ ≤ 0.98, by rejection.
fn random_theta(rng: &mut SeededRng, c: usize) -> ThresholdVector {
    let hi = (0.05 + 2.0 * (0.98 / c as f64 - 0.05)).clamp(0.051, 0.3);
    loop {
        let t: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..hi)).collect();
        if t.iter().sum::<f64>() <= 0.98 {
            return ThresholdVector::new(t).expect("in range");
        }
    }
}

// −1/N Σ p̂ ln f, written out without the library helpers.
fn cross_entropy_oracle(labels: &Matrix, probs: &ProbMatrix) -> f64 {
    let mut total = 0.0;
    for r in 0..labels.rows() {
        for c in 0..labels.cols() {
            total -= labels.get(r, c) * probs.get(r, c).ln();
        }
    }
    total / labels.rows() as f64
}

/// Compares `risk` on unclipped transformed labels with the ordinary
/// cross-entropy risk; reports the largest residual.
pub fn risk_equivalence(instances: usize, seed: u64, risk: &RiskFn) -> CheckResult {
    timed("risk-equivalence", || {
        let mut rng = SeededRng::new(seed ^ 0x5151);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let c = rng.random_range(2..=10);
            let n = rng.random_range(1..=8);
            let p_hat = random_probs(&mut rng, n, c);
            let f = random_probs(&mut rng, n, c);
            let theta = random_theta(&mut rng, c);
            let eta = complementary_transform(p_hat.as_matrix(), &theta)?;
            let got = risk(&eta, &f, &theta)?;
            let want = cross_entropy_oracle(p_hat.as_matrix(), &f);
            worst = worst.max((got - want).abs());
        }
        Ok((
            worst <= RISK_TOL,
            worst,
            format!("max residual {worst:.3e} over {instances} instances"),
        ))
    })
}

/// Solves `a · x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .expect("nonempty");
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let m = a[i][k] / a[k][k];
            let (upper, lower) = a.split_at_mut(i);
            for (dst, src) in lower[0][k..].iter_mut().zip(&upper[k][k..]) {
                *dst -= m * src;
            }
            b[i] -= m * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Inverse after forward must return the input; the inverse must also agree
/// with a direct linear solve of `(e eᵀ − Θ⁻¹) p̂ = η̄`.
pub fn round_trip(instances: usize, seed: u64) -> CheckResult {
    timed("sherman-morrison", || {
        let mut rng = SeededRng::new(seed ^ 0x5353);
        let mut worst_trip = 0.0f64;
        let mut worst_solve = 0.0f64;
        for _ in 0..instances {
            let c = rng.random_range(2..=10);
            let p_hat = random_probs(&mut rng, 1, c);
            let theta = random_theta(&mut rng, c);
            let eta = complementary_transform(p_hat.as_matrix(), &theta)?;
            let back = inverse_transform(&eta, &theta)?;
            let t = theta.as_slice();
            let a = (0..c)
                .map(|i| (0..c).map(|j| 1.0 - if i == j { 1.0 / t[i] } else { 0.0 }).collect())
                .collect();
            let direct = solve(a, eta.row(0).to_vec());
            for (j, d) in direct.iter().enumerate() {
                worst_trip = worst_trip.max((back.get(0, j) - p_hat.get(0, j)).abs());
                worst_solve = worst_solve.max((back.get(0, j) - d).abs());
            }
        }
        let passed = worst_trip <= ROUND_TRIP_TOL && worst_solve <= ROUND_TRIP_TOL;
        Ok((
            passed,
            worst_trip.max(worst_solve),
            format!("max round-trip error {worst_trip:.3e}, vs direct solve {worst_solve:.3e}"),
        ))
    })
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        0.0
    } else {
        diff / norm
    }
}

/// Central-difference gradient of `value` with respect to every logit.
pub fn fd_logit_gradient(logits: &Matrix, h: f64, value: impl Fn(&ProbMatrix) -> f64) -> Vec<f64> {
    let mut z = logits.clone();
    let mut out = Vec::with_capacity(z.as_slice().len());
    for k in 0..z.as_slice().len() {
        let orig = z.as_slice()[k];
        z.as_mut_slice()[k] = orig + h;
        let up = value(&softmax(&LogitMatrix::new(z.clone()).expect("finite")));
        z.as_mut_slice()[k] = orig - h;
        let down = value(&softmax(&LogitMatrix::new(z.clone()).expect("finite")));
        z.as_mut_slice()[k] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

// Smallest distance from any probability to its threshold; flags are stable
// under the finite-difference step when this is comfortably positive.
fn flag_margin(p: &ProbMatrix, theta: &ThresholdVector) -> f64 {
    p.row_iter()
        .flat_map(|r| r.iter().zip(theta.as_slice()).map(|(a, b)| (a - b).abs()))
        .fold(f64::INFINITY, f64::min)
}

fn top2_gap(p: &ProbMatrix) -> f64 {
    p.row_iter()
        .map(|r| {
            let mut s = r.to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            s[0] - s[1]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Analytic logit gradients of all four losses against central differences.
pub fn logit_gradients(instances: usize, seed: u64) -> CheckResult {
    timed("logit-gradients", || {
        let mut rng = SeededRng::new(seed ^ 0x6767);
        let mut worst = [0.0f64; 4];
        let mut done = [0usize; 4];
        while done.iter().any(|&d| d < instances) {
            let c = rng.random_range(2..=10);
            let n = rng.random_range(1..=4);
            let logits = random_logits(&mut rng, n, c, 1.5);
            let p = softmax(&logits);
            let theta = random_theta(&mut rng, c);
            let weights = soft_complementary(&random_probs(&mut rng, n, c), &theta)?;
            let z = logits.as_matrix();
            let mut record = |k: usize, r: LossResult, value: &dyn Fn(&ProbMatrix) -> f64| {
                if done[k] < instances {
                    let fd = fd_logit_gradient(z, FD_STEP, value);
                    worst[k] = worst[k].max(relative_error(r.grad_logits.as_slice(), &fd));
                    done[k] += 1;
                }
            };
            if flag_margin(&p, &theta) > 1e-4 && hard_complementary(&p, &theta)?.count() > 0 {
                let t = theta.clone();
                record(0, bcl_loss(&p, &theta)?, &move |q| {
                    bcl_loss(q, &t).expect("valid").value
                });
            }
            if weights.as_slice().iter().any(|&w| w > 0.0) {
                let (w, t) = (weights.clone(), theta.clone());
                record(1, ecl_risk(&weights, &p, &theta)?, &move |q| {
                    ecl_risk(&w, q, &t).expect("valid").value
                });
            }
            if top2_gap(&p) > 1e-4 {
                let fixed = pseudo_label(&p);
                record(2, npl_loss(&p)?, &move |q| {
                    cross_entropy(q, &fixed).expect("valid").value
                });
            }
            record(3, entropy_loss(&p)?, &|q| entropy_loss(q).expect("valid").value);
        }
        let passed = worst.iter().all(|&w| w < LOGIT_GRAD_TOL);
        Ok((
            passed,
            worst.iter().cloned().fold(0.0, f64::max),
            format!(
                "max rel error bcl {:.2e}, ecl {:.2e}, npl {:.2e}, entropy {:.2e}",
                worst[0], worst[1], worst[2], worst[3]
            ),
        ))
    })
}

/// Backpropagated parameter gradients of a small network against central differences.
pub fn model_gradients(seed: u64) -> CheckResult {
    timed("model-gradients", || {
        let mut rng = SeededRng::new(seed ^ 0x7979);
        let mut model = MlpModel::new(&[5, 8, 6, 3], seed)?;
        for id in model.param_ids() {
            for v in model.param_mut(id) {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let n = 7;
        let x = Matrix::from_vec(n, 5, (0..n * 5).map(|_| rng.sample(StandardNormal)).collect())?;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let loss = |m: &MlpModel| -> Result<f64> {
            let (logits, _) = m.forward(&x, BnMode::TrainStats)?;
            Ok(cross_entropy(&softmax(&logits), &labels)?.value)
        };
        let (logits, cache) = model.forward(&x, BnMode::TrainStats)?;
        let r = cross_entropy(&softmax(&logits), &labels)?;
        let grads = model.backward(&cache, &r.grad_logits, ParamGroupSelector::All)?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for id in model.param_ids() {
            let g = grads.get(id).expect("all groups requested").to_vec();
            for k in 0..g.len() {
                let orig = model.param(id)[k];
                model.param_mut(id)[k] = orig + FD_STEP;
                let up = loss(&model)?;
                model.param_mut(id)[k] = orig - FD_STEP;
                let down = loss(&model)?;
                model.param_mut(id)[k] = orig;
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
            analytic.extend(g);
        }
        let err = relative_error(&analytic, &numeric);
        Ok((
            err < MODEL_GRAD_TOL,
            err,
            format!("rel error {err:.2e} over {} parameters", analytic.len()),
        ))
    })
}

/// Insertion sort followed by interpolation at rank `t/100 · (n−1)`.
pub fn naive_percentile(values: &[f64], t: f64) -> f64 {
    let mut s: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        let pos = s.iter().position(|&x| x > v).unwrap_or(s.len());
        s.insert(pos, v);
    }
    let rank = t / 100.0 * (s.len() - 1) as f64;
    let lo = rank as usize;
    let hi = if (lo as f64) < rank { lo + 1 } else { lo };
    s[lo] + (s[hi] - s[lo]) * (rank - lo as f64)
}

/// Library percentile against [`naive_percentile`], bit for bit.
pub fn percentile_oracle(instances: usize, seed: u64) -> CheckResult {
    timed("percentile-oracle", || {
        let mut rng = SeededRng::new(seed ^ 0x8b8b);
        let mut mismatches = 0;
        for i in 0..instances {
            let n = rng.random_range(1..=60);
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let t = match i % 4 {
                0 => 75.0,
                1 => rng.random_range(0..=100) as f64,
                _ => rng.random_range(0.0..=100.0),
            };
            if percentile(&values, t)?.to_bits() != naive_percentile(&values, t).to_bits() {
                mismatches += 1;
            }
        }
        Ok((
            mismatches == 0,
            mismatches as f64,
            format!("{mismatches} mismatches over {instances} inputs"),
        ))
    })
}

/// Calibrated stream: every row is a softmax of scaled Gaussian logits and the
/// true label is drawn from that row.
pub fn calibrated_stream(samples: usize, classes: usize, seed: u64) -> (ProbMatrix, Vec<usize>) {
    let mut rng = SeededRng::new(seed);
    let probs = softmax(&random_logits(&mut rng, samples, classes, 2.0));
    let truth = probs
        .row_iter()
        .map(|row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return c;
                }
            }
            classes - 1
        })
        .collect();
    (probs, truth)
}

/// Empirical complementary-label correctness against the closed-form bound,
/// and against pseudo-label accuracy below the crossover threshold.
pub fn cl_bound_check(samples: usize, seed: u64) -> CheckResult {
    timed("cl-bound", || {
        let classes = 10;
        let (probs, truth) = calibrated_stream(samples, classes, seed ^ 0x9d9d);
        let theta = ThresholdVector::uniform(0.05, classes)?;
        let correct = cl_correctness(&hard_complementary(&probs, &theta)?, &truth)?;
        let bound = cl_bound(theta.max(), classes)?;
        let se = (bound * (1.0 - bound) / samples as f64).sqrt();
        let bound_ok = correct >= bound - 3.0 * se;

        let top1 = probs
            .row_iter()
            .map(|r| r.iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / samples as f64;
        let cross = threshold_crossover(top1, classes)?;
        let low = ThresholdVector::uniform(0.5 * cross, classes)?;
        let cl_low = cl_correctness(&hard_complementary(&probs, &low)?, &truth)?;
        let pl = pl_accuracy(&pseudo_label(&probs), &truth)?;
        let beats = cl_low > pl;
        Ok((
            bound_ok && beats,
            correct,
            format!(
                "cl {correct:.4} vs bound {bound:.4} - 3se {:.4}; at θ={:.4}: cl {cl_low:.4} vs pl {pl:.4}",
                3.0 * se,
                0.5 * cross
            ),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_level_passes_without_bound_check() {
        let report = run(Level::Fast, 1);
        assert!(report.passed(), "{report}");
        assert!(report.checks.iter().all(|c| c.name != "cl-bound"));
    }

    #[test]
    fn flipped_sign_is_caught() {
        let r = risk_equivalence(100, 1, &|w, f, t| ecl_risk(w, f, t).map(|r| -r.value));
        assert!(!r.passed);
        assert!(r.metric > 0.1, "{r}");
    }

    #[test]
    fn solver_matches_known_system() {
        let x = solve(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]);
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn naive_percentile_examples() {
        let v = [0.4, 0.1, 0.3, 0.2];
        assert_eq!(naive_percentile(&v, 75.0), 0.325);
        assert_eq!(naive_percentile(&v, 0.0), 0.1);
        assert_eq!(naive_percentile(&v, 100.0), 0.4);
    }

    #[test]
    fn level_parses() {
        assert_eq!("full".parse::<Level>().unwrap(), Level::Full);
        assert!("slow".parse::<Level>().is_err());
    }
}

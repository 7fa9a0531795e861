//! Seeded synthetic source data and corruption families.
//!
//! Source data are `C` isotropic Gaussian clusters whose means lie on the
//! unit sphere in `d` dimensions. Corruptions are label-preserving feature
//! transforms whose magnitude grows with a severity level in `1..=5`.
//!
//! Severity constants (frozen):
//!
//! | kind            | transform at severity `s`                                              |
//! |-----------------|-------------------------------------------------------------------------|
//! | `gauss_noise`   | add `N(0, (NOISE_SCALE·s·sd_j)²)` per coordinate, `sd_j` the feature sd |
//! | `mean_shift`    | translate by `SHIFT_SCALE·s` along a random unit direction              |
//! | `feature_scale` | multiply coordinate `j` by `exp(u_j)`, `u_j ~ U(−SCALE_LOG·s, SCALE_LOG·s)` |
//! | `rotation_mix`  | `x ↦ x·((1−λ)I + λQ)`, `Q` random orthogonal, `λ = ROTATION_MIX·s/5`     |
//! | `mask_dropout`  | zero each coordinate independently with probability `DROPOUT_RATE·s`    |

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mix_seed, Matrix, SeededRng};

pub const NOISE_SCALE: f64 = 0.1;
pub const SHIFT_SCALE: f64 = 0.4;
pub const SCALE_LOG: f64 = 0.2;
pub const ROTATION_MIX: f64 = 0.6;
pub const DROPOUT_RATE: f64 = 0.1;

/// Default source-generation parameters.
pub const DEFAULT_CLASSES: usize = 10;
pub const DEFAULT_DIM: usize = 20;
pub const DEFAULT_PER_CLASS: usize = 500;
pub const DEFAULT_SPREAD: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub severity: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize, meta: DatasetMeta) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape("dataset labels", features.rows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                context: "dataset features".into(),
            });
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            meta: self.meta.clone(),
        }
    }

    /// Writes the columnar text format:
    ///
    /// ```text
    /// C,d,N,seed,generator,severity
    /// 10,20,5000,7,blobs,0
    /// <label>,<x_0>,...,<x_{d-1}>
    /// ```
    ///
    /// Floats use the shortest representation that round-trips exactly.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "C,d,N,seed,generator,severity")?;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            self.classes,
            self.dim(),
            self.len(),
            self.meta.seed,
            self.meta.generator,
            self.meta.severity
        )?;
        for (row, y) in self.features.row_iter().zip(&self.labels) {
            write!(w, "{y}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Dataset> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("dataset: missing {what}")))?
                .map_err(Error::from)
        };
        if next("header")?.trim() != "C,d,N,seed,generator,severity" {
            return Err(Error::Format("dataset: unexpected header".into()));
        }
        let meta_line = next("metadata")?;
        let f: Vec<&str> = meta_line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format("dataset: metadata needs 6 fields".into()));
        }
        let parse = |s: &str, what: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Format(format!("dataset: bad {what} '{s}'")))
        };
        let classes = parse(f[0], "C")? as usize;
        let dim = parse(f[1], "d")? as usize;
        let n = parse(f[2], "N")? as usize;
        let meta = DatasetMeta {
            seed: parse(f[3], "seed")?,
            generator: f[4].to_string(),
            severity: parse(f[5], "severity")? as u8,
        };
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let line = next("sample")?;
            let mut parts = line.trim().split(',');
            let y = parts
                .next()
                .ok_or_else(|| Error::Format(format!("dataset: empty line {i}")))?;
            labels.push(parse(y, "label")? as usize);
            let before = data.len();
            for p in parts {
                data.push(
                    p.parse::<f64>()
                        .map_err(|_| Error::Format(format!("dataset: bad feature '{p}' on sample {i}")))?,
                );
            }
            if data.len() - before != dim {
                return Err(Error::Format(format!("dataset: sample {i} has wrong width")));
            }
        }
        Dataset::new(Matrix::from_vec(n, dim, data)?, labels, classes, meta)
    }
}

/// Generates disjoint train and test splits, each with `n_per_class` samples per class.
pub fn make_source(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if dim < 2 {
        return Err(Error::invalid("need at least 2 feature dimensions"));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("need at least one sample per class"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!(
            "spread {spread} must be finite and non-negative"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let means: Vec<Vec<f64>> = (0..classes).map(|_| unit_vector(dim, &mut rng)).collect();
    let mut split = |name: &str| -> Result<Dataset> {
        let n = classes * n_per_class;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for (c, mu) in means.iter().enumerate() {
            for _ in 0..n_per_class {
                for m in mu {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(m + spread * z);
                }
                labels.push(c);
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let features = Matrix::from_vec(n, dim, data)?.select_rows(&order);
        let labels = order.iter().map(|&i| labels[i]).collect();
        Dataset::new(
            features,
            labels,
            classes,
            DatasetMeta {
                generator: name.to_string(),
                seed,
                severity: 0,
            },
        )
    };
    let train = split("blobs-train")?;
    let test = split("blobs-test")?;
    Ok((train, test))
}

fn unit_vector(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    None,
    GaussNoise,
    MeanShift,
    FeatureScale,
    RotationMix,
    MaskDropout,
}

impl CorruptionKind {
    pub const SHIFTS: [CorruptionKind; 5] = [
        CorruptionKind::GaussNoise,
        CorruptionKind::MeanShift,
        CorruptionKind::FeatureScale,
        CorruptionKind::RotationMix,
        CorruptionKind::MaskDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::GaussNoise => "gauss_noise",
            CorruptionKind::MeanShift => "mean_shift",
            CorruptionKind::FeatureScale => "feature_scale",
            CorruptionKind::RotationMix => "rotation_mix",
            CorruptionKind::MaskDropout => "mask_dropout",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => CorruptionKind::None,
            "gauss_noise" => CorruptionKind::GaussNoise,
            "mean_shift" => CorruptionKind::MeanShift,
            "feature_scale" => CorruptionKind::FeatureScale,
            "rotation_mix" => CorruptionKind::RotationMix,
            "mask_dropout" => CorruptionKind::MaskDropout,
            other => return Err(Error::invalid(format!("unknown corruption kind '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let c = Corruption { kind, severity };
        c.validate()?;
        Ok(c)
    }

    pub fn none() -> Self {
        Corruption {
            kind: CorruptionKind::None,
            severity: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CorruptionKind::None if self.severity != 0 => Err(Error::invalid("corruption 'none' takes severity 0")),
            CorruptionKind::None => Ok(()),
            _ if !(1..=5).contains(&self.severity) => Err(Error::invalid(format!(
                "severity {} outside 1..=5 for {}",
                self.severity, self.kind
            ))),
            _ => Ok(()),
        }
    }

    /// Stable identifier used to derive per-corruption seeds; independent of list position.
    pub fn id(&self) -> u64 {
        self.kind.tag() * 16 + self.severity as u64
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.kind, self.severity)
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.kind, self.severity)
    }
}

/// Applies a corruption. Labels, sample count and metadata generator are preserved.
pub fn corrupt(data: &Dataset, c: Corruption, seed: u64) -> Result<Dataset> {
    c.validate()?;
    let mut rng = SeededRng::new(mix_seed(seed, c.id()));
    let s = c.severity as f64;
    let (n, d) = data.features.shape();
    let mut x = data.features.clone();
    match c.kind {
        CorruptionKind::None => {}
        CorruptionKind::GaussNoise => {
            let sd = feature_sd(&data.features);
            for r in 0..n {
                for (v, sdj) in x.row_mut(r).iter_mut().zip(&sd) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += NOISE_SCALE * s * sdj * z;
                }
            }
        }
        CorruptionKind::MeanShift => {
            let dir = unit_vector(d, &mut rng);
            for r in 0..n {
                for (v, u) in x.row_mut(r).iter_mut().zip(&dir) {
                    *v += SHIFT_SCALE * s * u;
                }
            }
        }
        CorruptionKind::FeatureScale => {
            let half = SCALE_LOG * s;
            let factors: Vec<f64> = (0..d).map(|_| rng.random_range(-half..=half).exp()).collect();
            for r in 0..n {
                for (v, f) in x.row_mut(r).iter_mut().zip(&factors) {
                    *v *= f;
                }
            }
        }
        CorruptionKind::RotationMix => {
            let q = random_orthogonal(d, &mut rng);
            let lambda = ROTATION_MIX * s / 5.0;
            let mut m = q;
            for v in m.as_mut_slice().iter_mut() {
                *v *= lambda;
            }
            for i in 0..d {
                let cur = m.get(i, i);
                m.set(i, i, cur + (1.0 - lambda));
            }
            x = data.features.matmul(&m);
        }
        CorruptionKind::MaskDropout => {
            let p = (DROPOUT_RATE * s).min(1.0);
            for r in 0..n {
                for v in x.row_mut(r).iter_mut() {
                    if rng.random::<f64>() < p {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(Dataset {
        features: x,
        labels: data.labels.clone(),
        classes: data.classes,
        meta: DatasetMeta {
            generator: data.meta.generator.clone(),
            seed,
            severity: c.severity,
        },
    })
}

fn feature_sd(m: &Matrix) -> Vec<f64> {
    let n = m.rows() as f64;
    let mut mean = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v / n;
        }
    }
    let mut var = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *a += (v - mu) * (v - mu) / n;
        }
    }
    var.into_iter().map(f64::sqrt).collect()
}

/// Haar-distributed orthogonal matrix via Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut SeededRng) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_rows(&basis).expect("square basis")
}

/// The ten-item default suite, in its fixed order.
pub fn default_suite() -> Vec<Corruption> {
    use CorruptionKind::*;
    [
        (MeanShift, 3),
        (GaussNoise, 5),
        (RotationMix, 3),
        (MaskDropout, 5),
        (FeatureScale, 3),
        (MeanShift, 5),
        (RotationMix, 5),
        (GaussNoise, 3),
        (MaskDropout, 3),
        (FeatureScale, 5),
    ]
    .into_iter()
    .map(|(kind, severity)| Corruption { kind, severity })
    .collect()
}

/// Seeded permutation of a corruption list.
pub fn shuffled(list: &[Corruption], seed: u64) -> Vec<Corruption> {
    let mut out = list.to_vec();
    out.shuffle(&mut SeededRng::new(seed));
    out
}

/// Seeds used for the shuffled-order experiment.
pub const SHUFFLE_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

/// Draws a stream of `batches × batch_size` samples from `pool` and applies `c`.
///
/// Both the sample order and the corruption randomness derive from
/// `(seed, c)`, never from the position of `c` in a scenario.
pub fn make_stream(pool: &Dataset, c: Corruption, batches: usize, batch_size: usize, seed: u64) -> Result<Dataset> {
    let total = batches * batch_size;
    if total == 0 {
        return Err(Error::invalid("stream must contain at least one sample"));
    }
    let stream_seed = mix_seed(seed, c.id());
    let mut rng = SeededRng::new(mix_seed(stream_seed, 0x5354_5245_414d));
    let mut idx = Vec::with_capacity(total);
    while idx.len() < total {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        idx.extend(order.into_iter().take(total - idx.len()));
    }
    corrupt(&pool.subset(&idx), c, stream_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Dataset, Dataset) {
        make_source(3, 4, 20, 0.3, 9).unwrap()
    }

    #[test]
    fn source_is_deterministic_and_valid() {
        let (a, b) = small();
        let (c, d) = small();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(a.len(), 60);
        assert_eq!(b.len(), 60);
        assert_ne!(a.features, b.features);
        let counts = (0..3).map(|k| a.labels.iter().filter(|&&y| y == k).count());
        assert!(counts.into_iter().all(|n| n == 20));
    }

    #[test]
    fn source_rejects_bad_counts() {
        assert!(make_source(1, 4, 10, 0.3, 0).is_err());
        assert!(make_source(3, 1, 10, 0.3, 0).is_err());
        assert!(make_source(3, 4, 0, 0.3, 0).is_err());
    }

    #[test]
    fn identity_corruption() {
        let (a, _) = small();
        let out = corrupt(&a, Corruption::none(), 5).unwrap();
        assert_eq!(out.features, a.features);
        assert_eq!(out.labels, a.labels);
    }

    #[test]
    fn severity_range_enforced() {
        assert!(Corruption::new(CorruptionKind::GaussNoise, 0).is_err());
        assert!(Corruption::new(CorruptionKind::GaussNoise, 6).is_err());
        assert!(Corruption::new(CorruptionKind::None, 1).is_err());
        assert!("fog".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn corruptions_preserve_labels_and_are_deterministic() {
        let (a, _) = small();
        for kind in CorruptionKind::SHIFTS {
            for s in 1..=5 {
                let c = Corruption::new(kind, s).unwrap();
                let x = corrupt(&a, c, 3).unwrap();
                let y = corrupt(&a, c, 3).unwrap();
                assert_eq!(x, y);
                assert_eq!(x.labels, a.labels);
                assert_eq!(x.len(), a.len());
                assert!(x.features.is_finite());
                assert_ne!(x.features, a.features, "{c} changed nothing");
            }
        }
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let q = random_orthogonal(6, &mut SeededRng::new(1));
        let qqt = q.matmul_t(&q);
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qqt.get(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_suite_is_stable() {
        let names: Vec<String> = default_suite().iter().map(|c| c.label()).collect();
        assert_eq!(
            names,
            [
                "mean_shift-3",
                "gauss_noise-5",
                "rotation_mix-3",
                "mask_dropout-5",
                "feature_scale-3",
                "mean_shift-5",
                "rotation_mix-5",
                "gauss_noise-3",
                "mask_dropout-3",
                "feature_scale-5",
            ]
        );
    }

    #[test]
    fn shuffles_are_distinct_permutations() {
        let base = default_suite();
        let mut sorted_base = base.clone();
        sorted_base.sort();
        let mut orders = Vec::new();
        for s in SHUFFLE_SEEDS {
            let o = shuffled(&base, s);
            let mut sorted = o.clone();
            sorted.sort();
            assert_eq!(sorted, sorted_base);
            orders.push(o);
        }
        for i in 0..orders.len() {
            for j in i + 1..orders.len() {
                assert_ne!(orders[i], orders[j]);
            }
            assert_ne!(orders[i], base);
        }
    }

    #[test]
    fn stream_depends_on_corruption_not_position() {
        let (_, pool) = small();
        let c = Corruption::new(CorruptionKind::MeanShift, 3).unwrap();
        let a = make_stream(&pool, c, 3, 8, 1).unwrap();
        let b = make_stream(&pool, c, 3, 8, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 24);
        let long = make_stream(&pool, c, 10, 8, 1).unwrap();
        assert_eq!(long.len(), 80);
    }

    #[test]
    fn text_round_trip() {
        let (a, _) = small();
        let mut buf = Vec::new();
        a.write_text(&mut buf).unwrap();
        let back = Dataset::read_text(&buf[..]).unwrap();
        assert_eq!(back, a);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("C,d,N,seed,generator,severity\n3,4,60,9,blobs-train,0\n"));
        assert!(Dataset::read_text(&b"C,d,N\n"[..]).is_err());
    }
}

//! Minimal dense classifier with batch normalization and hand-written backprop.
//!
//! Architecture for `dims = [d, h1, ..., hk, C]`:
//! `k` hidden blocks of `affine -> batchnorm -> relu`, then a final affine
//! layer of width `C`. Hidden affine parameters belong to the `feature`
//! group, batch-norm scale/shift to `bn`, and the last affine layer to
//! `classifier`.

mod optim;
mod train;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{LogitMatrix, Matrix, SeededRng};

pub use optim::{Adam, AdamConfig};
pub use train::{
    accuracy, draw_known_negatives, train_source, train_with_known_cl, KnownClConfig, TrainConfig, TrainSummary,
};

/// Floor applied to batch-norm variances.
pub const VAR_FLOOR: f64 = 1e-5;

/// Exponential-moving-average factor for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Bn,
    Feature,
    Classifier,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroupSelector {
    Bn,
    Feature,
    Classifier,
    All,
}

impl ParamGroupSelector {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            ParamGroupSelector::All => true,
            ParamGroupSelector::Bn => group == ParamGroup::Bn,
            ParamGroupSelector::Feature => group == ParamGroup::Feature,
            ParamGroupSelector::Classifier => group == ParamGroup::Classifier,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Identifies one parameter tensor. `layer` counts affine layers from the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "bn_gamma",
            ParamKind::Beta => "bn_beta",
        };
        write!(f, "layer{}.{}", self.layer, kind)
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current batch's mean and variance.
    TrainStats,
    /// Normalize with the stored running statistics.
    RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `fan_in × fan_out`, row-major.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        Linear {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul(&self.weight);
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub linear: Linear,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    seed: u64,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

/// Per-block intermediate values kept for backprop.
#[derive(Clone, Debug)]
struct BlockCache {
    input: Matrix,
    xhat: Matrix,
    /// Post-relu output, which is the next layer's input.
    activated: Matrix,
    inv_std: Vec<f64>,
    /// Per-feature flag: the variance floor was active (normalizer treated as constant).
    floored: Vec<bool>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Everything [`MlpModel::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    dims: Vec<usize>,
    mode: BnMode,
    batch: usize,
    blocks: Vec<BlockCache>,
    head_input: Matrix,
}

impl ForwardCache {
    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Normalized pre-affine activations of hidden block `i`.
    pub fn normalized(&self, i: usize) -> &Matrix {
        &self.blocks[i].xhat
    }
}

/// Parameter gradients for the selected group only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<ParamId, Vec<f64>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.0.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Flattened values in canonical parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.values().flatten().copied().collect()
    }
}

impl MlpModel {
    /// Builds a model with seeded Glorot-uniform affine weights, zero biases
    /// and identity batch-norm.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(format!(
                "model needs at least 2 widths, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("model widths must be positive"));
        }
        let mut rng = SeededRng::new(seed);
        let last = dims.len() - 1;
        let blocks = dims[..last]
            .windows(2)
            .map(|w| Block {
                linear: Linear::init(w[0], w[1], &mut rng),
                bn: BatchNorm::new(w[1]),
            })
            .collect();
        let head = Linear::init(dims[last - 1], dims[last], &mut rng);
        Ok(MlpModel {
            dims: dims.to_vec(),
            seed,
            blocks,
            head,
        })
    }

    /// Assembles a model from explicit parts (used by checkpoint loading).
    pub fn from_parts(dims: Vec<usize>, seed: u64, blocks: Vec<Block>, head: Linear) -> Result<Self> {
        if dims.len() < 2 || blocks.len() != dims.len() - 2 {
            return Err(Error::invalid("block count does not match dims"));
        }
        for (i, b) in blocks.iter().enumerate() {
            let (fi, fo) = (dims[i], dims[i + 1]);
            if b.linear.weight.shape() != (fi, fo)
                || b.linear.bias.len() != fo
                || b.bn.gamma.len() != fo
                || b.bn.beta.len() != fo
                || b.bn.running_mean.len() != fo
                || b.bn.running_var.len() != fo
            {
                return Err(Error::invalid(format!("block {i} shapes inconsistent with dims")));
            }
            if b.bn.running_var.iter().any(|&v| v.is_nan() || v <= 0.0) {
                return Err(Error::invalid(format!("block {i} has non-positive running variance")));
            }
        }
        let n = dims.len();
        if head.weight.shape() != (dims[n - 2], dims[n - 1]) || head.bias.len() != dims[n - 1] {
            return Err(Error::invalid("head shape inconsistent with dims"));
        }
        Ok(MlpModel {
            dims,
            seed,
            blocks,
            head,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        match id.kind {
            ParamKind::Gamma | ParamKind::Beta => ParamGroup::Bn,
            _ if id.layer == self.blocks.len() => ParamGroup::Classifier,
            _ => ParamGroup::Feature,
        }
    }

    /// All trainable parameter ids in canonical order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in 0..self.blocks.len() {
            for kind in [ParamKind::Weight, ParamKind::Bias, ParamKind::Gamma, ParamKind::Beta] {
                ids.push(ParamId { layer, kind });
            }
        }
        let layer = self.blocks.len();
        ids.push(ParamId {
            layer,
            kind: ParamKind::Weight,
        });
        ids.push(ParamId {
            layer,
            kind: ParamKind::Bias,
        });
        ids
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        let head = id.layer == self.blocks.len();
        match (id.kind, head) {
            (ParamKind::Weight, true) => self.head.weight.as_slice(),
            (ParamKind::Bias, true) => &self.head.bias,
            (ParamKind::Weight, false) => self.blocks[id.layer].linear.weight.as_slice(),
            (ParamKind::Bias, false) => &self.blocks[id.layer].linear.bias,
            (ParamKind::Gamma, false) => &self.blocks[id.layer].bn.gamma,
            (ParamKind::Beta, false) => &self.blocks[id.layer].bn.beta,
            (_, true) => panic!("head has no batch-norm parameters"),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [f64] {
        let head = id.layer == self.blocks.len();
        match (id.kind, head) {
            (ParamKind::Weight, true) => self.head.weight.as_mut_slice(),
            (ParamKind::Bias, true) => &mut self.head.bias,
            (ParamKind::Weight, false) => self.blocks[id.layer].linear.weight.as_mut_slice(),
            (ParamKind::Bias, false) => &mut self.blocks[id.layer].linear.bias,
            (ParamKind::Gamma, false) => &mut self.blocks[id.layer].bn.gamma,
            (ParamKind::Beta, false) => &mut self.blocks[id.layer].bn.beta,
            (_, true) => panic!("head has no batch-norm parameters"),
        }
    }

    /// Number of scalar parameters in the given group selection.
    pub fn param_count(&self, sel: ParamGroupSelector) -> usize {
        self.param_ids()
            .into_iter()
            .filter(|&id| sel.includes(self.group_of(id)))
            .map(|id| self.param(id).len())
            .sum()
    }

    /// Forward pass. Does not touch running statistics; see
    /// [`MlpModel::absorb_batch_stats`] and [`MlpModel::forward_train`].
    pub fn forward(&self, x: &Matrix, mode: BnMode) -> Result<(LogitMatrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("forward input width", self.input_dim(), x.cols()));
        }
        let n = x.rows();
        if mode == BnMode::TrainStats && n < 2 {
            return Err(Error::invalid(format!(
                "batch statistics need at least 2 samples, got {n}"
            )));
        }
        if n == 0 {
            return Err(Error::Empty("forward batch"));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let z = block.linear.apply(&h);
            let width = z.cols();
            let (mean, var) = match mode {
                BnMode::TrainStats => column_moments(&z),
                BnMode::RunningStats => (block.bn.running_mean.clone(), block.bn.running_var.clone()),
            };
            let floored: Vec<bool> = var.iter().map(|&v| v < VAR_FLOOR).collect();
            let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(VAR_FLOOR).sqrt()).collect();
            let mut xhat = z;
            let mut act = Matrix::zeros(n, width);
            for r in 0..n {
                let xh = xhat.row_mut(r);
                for j in 0..width {
                    xh[j] = (xh[j] - mean[j]) * inv_std[j];
                }
                let xh = xhat.row(r);
                for (j, a) in act.row_mut(r).iter_mut().enumerate() {
                    *a = (block.bn.gamma[j] * xh[j] + block.bn.beta[j]).max(0.0);
                }
            }
            let input = std::mem::replace(&mut h, act);
            caches.push(BlockCache {
                input,
                xhat,
                activated: h.clone(),
                inv_std,
                floored,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let logits = self.head.apply(&h);
        let logits = LogitMatrix::new(logits)?;
        Ok((
            logits,
            ForwardCache {
                dims: self.dims.clone(),
                mode,
                batch: n,
                blocks: caches,
                head_input: h,
            },
        ))
    }

    /// Pure evaluation-mode forward pass.
    pub fn predict(&self, x: &Matrix) -> Result<LogitMatrix> {
        Ok(self.forward(x, BnMode::RunningStats)?.0)
    }

    /// Folds the batch statistics of a train-stats forward pass into the running statistics.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        self.check_cache(cache)?;
        if cache.mode != BnMode::TrainStats {
            return Ok(());
        }
        let n = cache.batch as f64;
        let unbias = n / (n - 1.0);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            let m = block.bn.momentum;
            for j in 0..block.bn.gamma.len() {
                block.bn.running_mean[j] = (1.0 - m) * block.bn.running_mean[j] + m * c.batch_mean[j];
                let v = (c.batch_var[j] * unbias).max(VAR_FLOOR);
                block.bn.running_var[j] = (1.0 - m) * block.bn.running_var[j] + m * v;
            }
        }
        Ok(())
    }

    /// Train-stats forward that also updates running statistics.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(LogitMatrix, ForwardCache)> {
        let (logits, cache) = self.forward(x, BnMode::TrainStats)?;
        self.absorb_batch_stats(&cache)?;
        Ok((logits, cache))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.dims != self.dims || cache.blocks.len() != self.blocks.len() {
            return Err(Error::shape(
                "forward cache",
                format!("{:?}", self.dims),
                format!("{:?}", cache.dims),
            ));
        }
        Ok(())
    }

    /// Backpropagates `grad_logits` (dLoss/dlogits) and returns gradients
    /// for the parameters in `group` only.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix, group: ParamGroupSelector) -> Result<Gradients> {
        self.check_cache(cache)?;
        if grad_logits.shape() != (cache.batch, self.num_classes()) {
            return Err(Error::shape(
                "backward grad_logits",
                format!("{}x{}", cache.batch, self.num_classes()),
                format!("{}x{}", grad_logits.rows(), grad_logits.cols()),
            ));
        }
        let mut out = BTreeMap::new();
        let head_layer = self.blocks.len();
        if group.includes(ParamGroup::Classifier) {
            out.insert(
                ParamId {
                    layer: head_layer,
                    kind: ParamKind::Weight,
                },
                cache.head_input.t_matmul(grad_logits).into_vec(),
            );
            out.insert(
                ParamId {
                    layer: head_layer,
                    kind: ParamKind::Bias,
                },
                column_sums(grad_logits),
            );
        }
        let needs_blocks = group.includes(ParamGroup::Bn) || group.includes(ParamGroup::Feature);
        if !needs_blocks {
            return Ok(Gradients(out));
        }

        let n = cache.batch;
        let mut grad = grad_logits.matmul_t(&self.head.weight);
        for (layer, (block, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let width = block.bn.gamma.len();
            // relu
            for r in 0..n {
                let a = c.activated.row(r);
                for (g, &av) in grad.row_mut(r).iter_mut().zip(a) {
                    if av <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let dgamma: Vec<f64> = (0..width)
                .map(|j| (0..n).map(|r| grad.get(r, j) * c.xhat.get(r, j)).sum())
                .collect();
            let dbeta = column_sums(&grad);
            if group.includes(ParamGroup::Bn) {
                out.insert(
                    ParamId {
                        layer,
                        kind: ParamKind::Gamma,
                    },
                    dgamma.clone(),
                );
                out.insert(
                    ParamId {
                        layer,
                        kind: ParamKind::Beta,
                    },
                    dbeta.clone(),
                );
            }
            if layer == 0 && !group.includes(ParamGroup::Feature) {
                break;
            }
            // d(loss)/d(pre-bn)
            let mut dz = Matrix::zeros(n, width);
            let nf = n as f64;
            for j in 0..width {
                let g = block.bn.gamma[j];
                let inv = c.inv_std[j];
                let batch_mode = cache.mode == BnMode::TrainStats;
                let batch_stats = batch_mode && !c.floored[j];
                let batch_centered = batch_mode && c.floored[j];
                // dxhat = dy * gamma; dy(r) = grad(r, j)
                if batch_stats {
                    // dz = inv/N * (N*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                    let sum_dxhat = dbeta[j] * g;
                    let sum_dxhat_xhat = dgamma[j] * g;
                    for r in 0..n {
                        let dxhat = grad.get(r, j) * g;
                        let v = inv / nf * (nf * dxhat - sum_dxhat - c.xhat.get(r, j) * sum_dxhat_xhat);
                        dz.set(r, j, v);
                    }
                } else if batch_centered {
                    // normalizer is constant, only the mean depends on z
                    let mean_dxhat = dbeta[j] * g / nf;
                    for r in 0..n {
                        dz.set(r, j, (grad.get(r, j) * g - mean_dxhat) * inv);
                    }
                } else {
                    for r in 0..n {
                        dz.set(r, j, grad.get(r, j) * g * inv);
                    }
                }
            }
            if group.includes(ParamGroup::Feature) {
                out.insert(
                    ParamId {
                        layer,
                        kind: ParamKind::Weight,
                    },
                    c.input.t_matmul(&dz).into_vec(),
                );
                out.insert(
                    ParamId {
                        layer,
                        kind: ParamKind::Bias,
                    },
                    column_sums(&dz),
                );
            }
            if layer == 0 {
                break;
            }
            grad = dz.matmul_t(&block.linear.weight);
        }
        Ok(Gradients(out))
    }

    /// Flattened parameters of the selected groups in canonical order.
    pub fn flat_params(&self, sel: ParamGroupSelector) -> Vec<f64> {
        self.param_ids()
            .into_iter()
            .filter(|&id| sel.includes(self.group_of(id)))
            .flat_map(|id| self.param(id).to_vec())
            .collect()
    }

    /// Overwrites the selected groups' parameters from a flat vector.
    pub fn set_flat_params(&mut self, sel: ParamGroupSelector, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count(sel) {
            return Err(Error::shape("set_flat_params", self.param_count(sel), flat.len()));
        }
        let mut off = 0;
        for id in self.param_ids() {
            if !sel.includes(self.group_of(id)) {
                continue;
            }
            let dst = self.param_mut(id);
            let len = dst.len();
            dst.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

/// Per-column mean and biased variance.
fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let mean: Vec<f64> = column_sums(m).into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use crate::risk::cross_entropy;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = SeededRng::new(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn construction() {
        let a = MlpModel::new(&[20, 64, 10], 7).unwrap();
        assert_eq!(a, MlpModel::new(&[20, 64, 10], 7).unwrap());
        assert_ne!(a, MlpModel::new(&[20, 64, 10], 8).unwrap());
        assert_eq!(a.blocks.len(), 1);
        assert!(MlpModel::new(&[20], 7).is_err());
        assert!(MlpModel::new(&[20, 0, 10], 7).is_err());
        let b = &a.blocks[0].bn;
        assert!(b.gamma.iter().all(|&g| g == 1.0) && b.beta.iter().all(|&v| v == 0.0));
        assert!(b.running_var.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn parameter_counts() {
        let m = MlpModel::new(&[4, 8, 8, 3], 1).unwrap();
        assert_eq!(m.param_count(ParamGroupSelector::Feature), 4 * 8 + 8 + 8 * 8 + 8);
        assert_eq!(m.param_count(ParamGroupSelector::Classifier), 8 * 3 + 3);
        assert_eq!(
            m.param_count(ParamGroupSelector::Feature) + m.param_count(ParamGroupSelector::Classifier),
            139
        );
        assert_eq!(m.param_count(ParamGroupSelector::Bn), 32);
        assert_eq!(m.param_count(ParamGroupSelector::All), 171);
    }

    #[test]
    fn train_stats_normalize() {
        let m = MlpModel::new(&[5, 7, 3], 2).unwrap();
        let x = gaussian(16, 5, 3);
        let (logits, cache) = m.forward(&x, BnMode::TrainStats).unwrap();
        assert_eq!(logits.as_matrix().shape(), (16, 3));
        let xhat = cache.normalized(0);
        for j in 0..7 {
            let col: Vec<f64> = (0..16).map(|r| xhat.get(r, j)).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn batch_rules() {
        let m = MlpModel::new(&[3, 4, 2], 2).unwrap();
        assert!(m.forward(&gaussian(1, 3, 1), BnMode::TrainStats).is_err());
        assert!(m.forward(&gaussian(1, 3, 1), BnMode::RunningStats).is_ok());
        assert!(m.forward(&gaussian(4, 2, 1), BnMode::RunningStats).is_err());
        let constant = Matrix::from_rows(&[[1.0, 2.0, 3.0]; 6]).unwrap();
        let (logits, _) = m.forward(&constant, BnMode::TrainStats).unwrap();
        assert!(logits.as_matrix().is_finite());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = MlpModel::new(&[3, 4, 2], 2).unwrap();
        let x = gaussian(8, 3, 5);
        let before = m.clone();
        let (_, cache) = m.forward(&x, BnMode::TrainStats).unwrap();
        assert_eq!(m, before);
        m.absorb_batch_stats(&cache).unwrap();
        let c = &cache.blocks[0];
        for j in 0..4 {
            assert!((m.blocks[0].bn.running_mean[j] - 0.1 * c.batch_mean[j]).abs() < 1e-15);
            let v = 0.9 + 0.1 * (c.batch_var[j] * 8.0 / 7.0).max(VAR_FLOOR);
            assert!((m.blocks[0].bn.running_var[j] - v).abs() < 1e-15);
        }
        assert_eq!(
            m.flat_params(ParamGroupSelector::All),
            before.flat_params(ParamGroupSelector::All)
        );
    }

    fn fd_check(mode: BnMode, x: &Matrix) -> f64 {
        let mut rng = SeededRng::new(17);
        let mut model = MlpModel::new(&[4, 6, 5, 3], 9).unwrap();
        for id in model.param_ids() {
            for v in model.param_mut(id) {
                *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for b in &mut model.blocks {
            for (k, v) in b.bn.running_mean.iter_mut().enumerate() {
                *v = 0.1 * k as f64;
            }
        }
        let labels = [0, 1, 2, 0, 1, 2, 2, 1];
        let loss = |m: &MlpModel| {
            let (logits, _) = m.forward(x, mode).unwrap();
            cross_entropy(&softmax(&logits), &labels).unwrap().value
        };
        let (logits, cache) = model.forward(x, mode).unwrap();
        let r = cross_entropy(&softmax(&logits), &labels).unwrap();
        let grads = model.backward(&cache, &r.grad_logits, ParamGroupSelector::All).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for id in model.param_ids() {
            let g = grads.get(id).unwrap().to_vec();
            for (k, &a) in g.iter().enumerate() {
                let orig = model.param(id)[k];
                model.param_mut(id)[k] = orig + h;
                let up = loss(&model);
                model.param_mut(id)[k] = orig - h;
                let down = loss(&model);
                model.param_mut(id)[k] = orig;
                let n = (up - down) / (2.0 * h);
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = gaussian(8, 4, 21);
        assert!(fd_check(BnMode::TrainStats, &x) < 1e-5);
        assert!(fd_check(BnMode::RunningStats, &x) < 1e-5);
    }

    #[test]
    fn group_filter() {
        let m = MlpModel::new(&[4, 6, 5, 3], 1).unwrap();
        let x = gaussian(8, 4, 2);
        let (logits, cache) = m.forward(&x, BnMode::TrainStats).unwrap();
        let g = cross_entropy(&softmax(&logits), &[0, 1, 2, 0, 1, 2, 0, 1])
            .unwrap()
            .grad_logits;
        for (sel, group) in [
            (ParamGroupSelector::Bn, ParamGroup::Bn),
            (ParamGroupSelector::Feature, ParamGroup::Feature),
            (ParamGroupSelector::Classifier, ParamGroup::Classifier),
        ] {
            let grads = m.backward(&cache, &g, sel).unwrap();
            assert!(!grads.is_empty());
            assert!(grads.ids().all(|id| m.group_of(id) == group));
            assert_eq!(grads.flatten().len(), m.param_count(sel));
        }
        let all = m.backward(&cache, &g, ParamGroupSelector::All).unwrap();
        assert_eq!(all.len(), m.param_ids().len());
        let zero = m
            .backward(&cache, &Matrix::zeros(8, 3), ParamGroupSelector::All)
            .unwrap();
        assert!(zero.flatten().iter().all(|&v| v == 0.0));
        assert!(m
            .backward(&cache, &Matrix::zeros(7, 3), ParamGroupSelector::All)
            .is_err());
        let other = MlpModel::new(&[4, 6, 3], 1).unwrap();
        assert!(other.backward(&cache, &g, ParamGroupSelector::All).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut m = MlpModel::new(&[4, 6, 3], 1).unwrap();
        let flat: Vec<f64> = (0..m.param_count(ParamGroupSelector::Bn)).map(|i| i as f64).collect();
        m.set_flat_params(ParamGroupSelector::Bn, &flat).unwrap();
        assert_eq!(m.flat_params(ParamGroupSelector::Bn), flat);
        assert!(m.set_flat_params(ParamGroupSelector::Bn, &flat[1..]).is_err());
    }
}

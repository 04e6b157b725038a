//! Target model family: a ReLU multilayer perceptron with a softmax
//! cross-entropy head, plus the optimizers used for local training and for
//! attack optimization.
//!
//! Parameters are flattened layer by layer, each layer as its row-major
//! `[fan_in x fan_out]` weight followed by its bias.

pub mod checkpoint;
mod optim;

pub use optim::{sgd_step, Adam, AdamConfig, Lbfgs, LbfgsConfig, LbfgsStep, OptimError};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("expected {expected} input columns, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("soft label row {row} sums to {sum}, expected 1")]
    SoftLabel { row: usize, sum: f64 },
    #[error("no training data")]
    EmptyData,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter vector has {found} values, layout needs {expected}")]
    Layout { expected: usize, found: usize },
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims().contains(&0) {
            return Err(ModelError::Config(format!(
                "all layer sizes must be positive: {:?}",
                self.layer_dims()
            )));
        }
        Ok(())
    }

    /// `[input, hidden..., classes]`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.layer_dims())
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[fan_in x fan_out]`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Model parameters, layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layers: Vec<Layer>,
}

impl ParamVector {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization from `cfg.seed`.
    pub fn init(cfg: &MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dims = cfg.layer_dims();
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, weight).expect("layer shape"),
                    bias,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(|l| l.weight.rows()).collect();
        if let Some(last) = self.layers.last() {
            dims.push(last.weight.cols());
        }
        dims
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Result<Self> {
        let expected = param_count(dims);
        if flat.len() != expected || dims.len() < 2 {
            return Err(ModelError::Layout {
                expected,
                found: flat.len(),
            });
        }
        let mut offset = 0;
        let layers = dims
            .windows(2)
            .map(|w| {
                let nw = w[0] * w[1];
                let weight = Tensor::matrix(w[0], w[1], flat[offset..offset + nw].to_vec())
                    .expect("layer shape");
                let bias = flat[offset + nw..offset + nw + w[1]].to_vec();
                offset += nw + w[1];
                Layer { weight, bias }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Offset of the final layer's weight block in the flat view.
    pub fn last_weight_range(&self) -> std::ops::Range<usize> {
        let mut offset = 0;
        for l in &self.layers[..self.layers.len() - 1] {
            offset += l.weight.numel() + l.bias.len();
        }
        let n = self.layers.last().map_or(0, |l| l.weight.numel());
        offset..offset + n
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Parameters placed on a graph.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    /// Places parameters as differentiable leaves.
    pub fn leaves(g: &mut Graph, params: &ParamVector) -> Self {
        Self::place(g, params, true)
    }

    pub fn constants(g: &mut Graph, params: &ParamVector) -> Self {
        Self::place(g, params, false)
    }

    fn place(g: &mut Graph, params: &ParamVector, differentiable: bool) -> Self {
        let layers = params
            .layers()
            .iter()
            .map(|l| {
                let b = Tensor::row(&l.bias);
                if differentiable {
                    (g.leaf(l.weight.clone()), g.leaf(b))
                } else {
                    (g.constant(l.weight.clone()), g.constant(b))
                }
            })
            .collect();
        Self { layers }
    }

    /// Node ids in canonical flattening order (weight, bias per layer).
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn layer_nodes(&self) -> &[(NodeId, NodeId)] {
        &self.layers
    }
}

/// Logits `[N x C]` of the MLP for inputs `x [N x input_dim]`.
pub fn forward(g: &mut Graph, params: &ParamNodes, x: NodeId) -> Result<NodeId> {
    let expected = g.value(params.layers[0].0).rows();
    let xs = g.shape(x);
    if xs.len() != 2 || xs[1] != expected {
        return Err(ModelError::Dimension {
            expected,
            found: xs.get(1).copied().unwrap_or(0),
        });
    }
    let mut h = x;
    let last = params.layers.len() - 1;
    for (i, &(w, b)) in params.layers.iter().enumerate() {
        let z = g.matmul(h, w)?;
        let z = g.add_row_vector(z, b)?;
        h = if i == last { z } else { g.relu(z)? };
    }
    Ok(h)
}

/// One-hot encoding `[N x C]` of hard labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(ModelError::LabelOutOfRange { label: y, classes });
        }
        data[r * classes + y] = 1.0;
    }
    Ok(Tensor::matrix(labels.len(), classes, data)?)
}

/// Training targets: hard class indices or one distribution per row.
#[derive(Clone, Debug)]
pub enum Targets {
    Hard(Vec<usize>),
    Soft(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(y) => y.len(),
            Targets::Soft(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Validated `[N x C]` target distribution.
    pub fn to_distribution(&self, classes: usize) -> Result<Tensor> {
        match self {
            Targets::Hard(y) => one_hot(y, classes),
            Targets::Soft(t) => {
                if !t.is_matrix() || t.cols() != classes {
                    return Err(ModelError::Dimension {
                        expected: classes,
                        found: t.shape().get(1).copied().unwrap_or(0),
                    });
                }
                for r in 0..t.rows() {
                    let sum: f64 = t.row_slice(r).iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(ModelError::SoftLabel { row: r, sum });
                    }
                }
                Ok(t.clone())
            }
        }
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Hard(y) => Targets::Hard(idx.iter().map(|&i| y[i]).collect()),
            Targets::Soft(t) => Targets::Soft(t.select_rows(idx)),
        }
    }
}

/// Mean cross-entropy `-(1/N) sum_n sum_c Y[n,c] log softmax(logits)[n,c]`.
///
/// `targets` is an `[N x C]` node; it may itself be differentiable.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let n = g.shape(logits).first().copied().unwrap_or(0);
    if n == 0 {
        return Err(ModelError::EmptyData);
    }
    let lsm = g.log_softmax_rows(logits)?;
    let prod = g.mul(targets, lsm)?;
    let total = g.sum(prod)?;
    Ok(g.scale(total, -1.0 / n as f64)?)
}

/// Full-batch gradient of the mean loss, flattened in canonical order.
pub fn full_batch_gradient(params: &ParamVector, x: &Tensor, targets: &Targets) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(ModelError::EmptyData);
    }
    let classes = params.dims().last().copied().unwrap_or(0);
    let y = targets.to_distribution(classes)?;
    let mut g = Graph::new();
    let p = ParamNodes::leaves(&mut g, params);
    let xn = g.constant(x.clone());
    let yn = g.constant(y);
    let logits = forward(&mut g, &p, xn)?;
    let loss = cross_entropy(&mut g, logits, yn)?;
    let grads = g.grad(loss, &p.ids())?;
    Ok(grads.into_iter().flat_map(Tensor::into_data).collect())
}

/// Outcome of one local epoch of minibatch SGD.
#[derive(Clone, Debug)]
pub struct EpochOutcome {
    pub params: ParamVector,
    /// Sum of the minibatch gradients applied during the epoch, equal to
    /// `(w_before - w_after) / lr`. For a single full batch this is exactly
    /// the full-batch gradient at `w_before`.
    pub gradient: Vec<f64>,
}

/// Runs one epoch of SGD with batch size `batch` over a shuffled order.
pub fn local_epoch<R: Rng>(
    params: &ParamVector,
    x: &Tensor,
    targets: &Targets,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> Result<EpochOutcome> {
    let n = x.rows();
    if n == 0 {
        return Err(ModelError::EmptyData);
    }
    let dims = params.dims();
    let mut flat = params.flatten();
    if batch == 0 || batch >= n {
        let grad = full_batch_gradient(params, x, targets)?;
        sgd_step(&mut flat, &grad, lr)?;
        return Ok(EpochOutcome {
            params: ParamVector::from_flat(&dims, &flat)?,
            gradient: grad,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, rng);
    let mut current = params.clone();
    let mut accum = vec![0.0; flat.len()];
    for chunk in order.chunks(batch) {
        let xb = x.select_rows(chunk);
        let yb = targets.select(chunk);
        let grad = full_batch_gradient(&current, &xb, &yb)?;
        sgd_step(&mut flat, &grad, lr)?;
        for (a, g) in accum.iter_mut().zip(&grad) {
            *a += g;
        }
        current = ParamVector::from_flat(&dims, &flat)?;
    }
    Ok(EpochOutcome {
        params: current,
        gradient: accum,
    })
}

/// Fisher-Yates shuffle driven by `rng`.
pub(crate) fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Inference-only activations (no tape).
#[derive(Clone, Debug)]
pub struct Activations {
    /// Input to the final layer `[N x H_last]`.
    pub last_hidden: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

pub fn infer(params: &ParamVector, x: &Tensor) -> Result<Activations> {
    let layers = params.layers();
    if x.cols() != layers[0].weight.rows() {
        return Err(ModelError::Dimension {
            expected: layers[0].weight.rows(),
            found: x.cols(),
        });
    }
    let mut h = x.clone();
    let mut last_hidden = x.clone();
    for (i, l) in layers.iter().enumerate() {
        let mut z = h.matmul(&l.weight)?;
        let cols = z.cols();
        for (k, v) in z.data_mut().iter_mut().enumerate() {
            *v += l.bias[k % cols];
        }
        if i + 1 == layers.len() {
            last_hidden = h;
            h = z;
        } else {
            h = z.map(|v| if v > 0.0 { v } else { 0.0 });
        }
    }
    let probs = softmax_rows(&h);
    Ok(Activations {
        last_hidden,
        logits: h,
        probs,
    })
}

/// Row-wise softmax of a logit matrix, max-shifted.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (m, n) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        let row = logits.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::matrix(m, n, out).expect("softmax shape")
}

/// Row-wise argmax with ties resolved to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn predict(params: &ParamVector, x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&infer(params, x)?.logits))
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainOptimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// 0 means full batch.
    pub batch: usize,
    pub lr: f64,
    pub optimizer: TrainOptimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 0,
            lr: 0.01,
            optimizer: TrainOptimizer::Sgd,
            seed: 0,
        }
    }
}

/// Centralized training loop.
pub fn train(
    params: &ParamVector,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<ParamVector> {
    let n = x.rows();
    if n == 0 {
        return Err(ModelError::EmptyData);
    }
    let dims = params.dims();
    let targets = Targets::Hard(labels.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = params.clone();
    let mut adam = Adam::new(current.len(), AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let batch = if cfg.batch == 0 { n } else { cfg.batch.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(batch) {
            let (xb, yb) = if chunk.len() == n {
                (x.clone(), targets.clone())
            } else {
                (x.select_rows(chunk), targets.select(chunk))
            };
            let grad = full_batch_gradient(&current, &xb, &yb)?;
            let mut flat = current.flatten();
            match cfg.optimizer {
                TrainOptimizer::Sgd => sgd_step(&mut flat, &grad, cfg.lr)?,
                TrainOptimizer::Adam => adam.step(&mut flat, &grad)?,
            }
            current = ParamVector::from_flat(&dims, &flat)?;
        }
    }
    Ok(current)
}

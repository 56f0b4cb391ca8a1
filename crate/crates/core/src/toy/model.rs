//! Small multilayer models whose every layer carries a frozen weight plus a
//! trainable low-rank adapter: `W_l = W0_l + A_l · B_l`.
//!
//! Hidden layers use `tanh`; the last layer emits logits for a softmax
//! cross-entropy loss. Trainable parameters are laid out layer by layer,
//! `A_l` (row-major, `out × r`) followed by `B_l` (row-major, `r × in`);
//! gradients use the same layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{Sample, Task, ToyDataset};
use crate::error::{Error, Result};
use crate::gradient_store::{ExampleGradient, GradientManifest, LayerSpec, Split};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    fn random(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks_exact(self.cols).map(|row| dot(row, x)).collect()
    }

    fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * yi;
            }
        }
        out
    }

    fn matmul(&self, other: &Matrix) -> Matrix {
        Matrix::from_fn(self.rows, other.cols, |i, j| (0..self.cols).map(|k| self.get(i, k) * other.get(k, j)).sum())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    pub w0: Matrix,
    pub a: Matrix,
    pub b: Matrix,
}

impl AdapterLayer {
    pub fn param_count(&self) -> usize {
        self.a.data.len() + self.b.data.len()
    }

    fn effective(&self) -> Matrix {
        let ab = self.a.matmul(&self.b);
        Matrix { rows: ab.rows, cols: ab.cols, data: self.w0.data.iter().zip(&ab.data).map(|(w, d)| w + d).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of layers `L`.
    pub layers: usize,
    pub hidden: usize,
    /// Adapter rank `r`.
    pub rank: usize,
    /// Standard deviation of the initial `A_l` entries (`B_l` starts at zero).
    pub adapter_init: f64,
    /// Gain of the frozen weights relative to `1/sqrt(fan_in)`.
    pub frozen_gain: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layers: 3, hidden: 8, rank: 2, adapter_init: 0.5, frozen_gain: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub layers: Vec<AdapterLayer>,
    pub rank: usize,
}

/// Forward-pass cache for one input.
struct Trace {
    /// Layer inputs `a_0 .. a_{L-1}`.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

/// Model with effective weights precomputed for repeated evaluation.
pub(crate) struct Compiled<'a> {
    model: &'a ToyModel,
    weights: Vec<Matrix>,
}

impl ToyModel {
    /// Seeded initialisation sized for `task`.
    pub fn init(task: &Task, cfg: &ModelConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.rank == 0 || (cfg.layers > 1 && cfg.hidden == 0) {
            return Err(Error::InvalidArgument("layers, rank and hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut dims = vec![task.input_dim()];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers - 1));
        dims.push(task.output_dim());
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let w0 = Matrix::random(fan_out, fan_in, cfg.frozen_gain / (fan_in as f64).sqrt(), &mut rng);
                let a = Matrix::random(fan_out, cfg.rank, cfg.adapter_init, &mut rng);
                let b = Matrix::zeros(cfg.rank, fan_in);
                AdapterLayer { w0, a, b }
            })
            .collect();
        Ok(Self { layers, rank: cfg.rank })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w0.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w0.rows
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(AdapterLayer::param_count).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(AdapterLayer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.a.data);
            p.extend_from_slice(&l.b.data);
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter vector length");
        let mut off = 0;
        for l in &mut self.layers {
            let na = l.a.data.len();
            l.a.data.copy_from_slice(&params[off..off + na]);
            off += na;
            let nb = l.b.data.len();
            l.b.data.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerSpec::new(i, format!("layer{i}.lora"), l.param_count()))
            .collect()
    }

    /// Short content hash of all weights, used as the manifest `model_tag`.
    pub fn tag(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for m in [&l.w0, &l.a, &l.b] {
                h.update((m.rows as u64).to_le_bytes());
                h.update((m.cols as u64).to_le_bytes());
                for x in &m.data {
                    h.update(x.to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        format!("toy-{hex}")
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.a.data.iter().chain(&l.b.data).all(|x| x.is_finite()))
    }

    pub(crate) fn compile(&self) -> Compiled<'_> {
        Compiled { model: self, weights: self.layers.iter().map(AdapterLayer::effective).collect() }
    }

    pub(crate) fn check_shape(&self, data: &ToyDataset) -> Result<()> {
        if self.input_dim() != data.task.input_dim() || self.output_dim() != data.task.output_dim() {
            return Err(Error::InvalidArgument(format!(
                "model maps {} -> {}, dataset needs {} -> {}",
                self.input_dim(),
                self.output_dim(),
                data.task.input_dim(),
                data.task.output_dim()
            )));
        }
        Ok(())
    }
}

fn log_softmax_nll(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let nll = sum.ln() + max - logits[target];
    let mut delta: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
    delta[target] -= 1.0;
    (nll, delta)
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// `(input, target)` pairs of one example: a single pair for classification,
/// one per transition for sequences.
fn pairs(sample: &Sample, vocab: usize) -> Vec<(Vec<f64>, usize)> {
    match sample {
        Sample::Point { features, label } => vec![(features.clone(), *label)],
        Sample::Sequence { tokens } => tokens.windows(2).map(|w| (one_hot(vocab, w[0]), w[1])).collect(),
    }
}

impl Compiled<'_> {
    fn forward(&self, x: &[f64]) -> Trace {
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut a = x.to_vec();
        for (l, w) in self.weights.iter().enumerate() {
            let z = w.matvec(&a);
            inputs.push(std::mem::replace(&mut a, z));
            if l < last {
                a.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Trace { inputs, logits: a }
    }

    /// Loss and per-layer adapter gradient of one `(input, target)` pair.
    fn pair_grad(&self, x: &[f64], target: usize) -> (f64, Vec<Vec<f64>>) {
        let trace = self.forward(x);
        let (nll, mut delta) = log_softmax_nll(&trace.logits, target);
        let mut grads = vec![Vec::new(); self.weights.len()];
        for l in (0..self.weights.len()).rev() {
            let layer = &self.model.layers[l];
            let input = &trace.inputs[l];
            // dW = delta · inputᵀ is rank one, so dA = delta (B·input)ᵀ and dB = (Aᵀ·delta) inputᵀ.
            let b_in = layer.b.matvec(input);
            let at_delta = layer.a.matvec_t(&delta);
            let mut g = Vec::with_capacity(layer.param_count());
            for &d in &delta {
                g.extend(b_in.iter().map(|&v| d * v));
            }
            for &s in &at_delta {
                g.extend(input.iter().map(|&v| s * v));
            }
            grads[l] = g;
            if l > 0 {
                let back = self.weights[l].matvec_t(&delta);
                delta = back.iter().zip(input).map(|(b, a)| b * (1.0 - a * a)).collect();
            }
        }
        (nll, grads)
    }

    fn pair_loss(&self, x: &[f64], target: usize) -> f64 {
        let trace = self.forward(x);
        log_softmax_nll(&trace.logits, target).0
    }

    pub(crate) fn example_loss(&self, sample: &Sample) -> f64 {
        let ps = pairs(sample, self.model.output_dim());
        ps.iter().map(|(x, t)| self.pair_loss(x, *t)).sum::<f64>() / ps.len() as f64
    }

    /// Token-level losses and gradients of one example.
    pub(crate) fn token_grads(&self, sample: &Sample) -> Vec<(f64, Vec<Vec<f64>>)> {
        pairs(sample, self.model.output_dim()).iter().map(|(x, t)| self.pair_grad(x, *t)).collect()
    }

    /// Token-averaged loss and gradient of one example.
    pub(crate) fn example_grad(&self, sample: &Sample) -> (f64, Vec<Vec<f64>>) {
        let per_token = self.token_grads(sample);
        let n = per_token.len() as f64;
        let mut iter = per_token.into_iter();
        let (mut loss, mut grad) = iter.next().expect("examples have at least one pair");
        for (l, g) in iter {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
        grad.iter_mut().flatten().for_each(|v| *v /= n);
        (loss / n, grad)
    }
}

/// Token-averaged loss of a single example.
pub fn example_loss(model: &ToyModel, sample: &Sample) -> f64 {
    model.compile().example_loss(sample)
}

/// Token-averaged loss and flattened per-layer gradient of a single example, in `f64`.
pub fn example_gradient(model: &ToyModel, sample: &Sample) -> (f64, Vec<Vec<f64>>) {
    model.compile().example_grad(sample)
}

/// Per-token `(loss, gradient)` pairs of a single example.
pub fn token_gradients(model: &ToyModel, sample: &Sample) -> Vec<(f64, Vec<Vec<f64>>)> {
    model.compile().token_grads(sample)
}

/// Output logits for one input vector.
pub fn logits(model: &ToyModel, input: &[f64]) -> Vec<f64> {
    model.compile().forward(input).logits
}

/// Per-example token-averaged losses, in dataset order.
pub fn example_losses(model: &ToyModel, data: &ToyDataset) -> Result<Vec<f64>> {
    model.check_shape(data)?;
    let c = model.compile();
    Ok(data.examples.iter().map(|e| c.example_loss(&e.sample)).collect())
}

/// Mean of the token-averaged example losses.
pub fn mean_loss(model: &ToyModel, data: &ToyDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("dataset is empty".into()));
    }
    let losses = example_losses(model, data)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `exp` of the mean (over examples) of the token-averaged negative log-likelihood.
pub fn perplexity(model: &ToyModel, data: &ToyDataset) -> Result<f64> {
    Ok(mean_loss(model, data)?.exp())
}

/// Mean loss and flattened mean gradient over `data`, summed in ascending
/// `example_id` order.
pub(crate) fn mean_loss_and_grad(model: &ToyModel, data: &ToyDataset) -> (f64, Vec<f64>) {
    let c = model.compile();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.examples[a].example_id.cmp(&data.examples[b].example_id));
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for i in order {
        let (l, g) = c.example_grad(&data.examples[i].sample);
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g.iter().flatten()) {
            *acc += v;
        }
    }
    let n = data.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// One [`ExampleGradient`] per example, in dataset order; layers run input to
/// output. `token_count` is the sequence length for token tasks, 1 otherwise.
pub fn per_example_gradients(model: &ToyModel, data: &ToyDataset) -> Result<GradientManifest> {
    model.check_shape(data)?;
    let c = model.compile();
    let examples: Vec<ExampleGradient> = data
        .examples
        .par_iter()
        .map(|ex| {
            let (loss, grads) = c.example_grad(&ex.sample);
            let per_layer: Vec<Vec<f32>> = grads.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();
            if !loss.is_finite() || per_layer.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of example `{}`", ex.example_id)));
            }
            Ok(ExampleGradient {
                example_id: ex.example_id.clone(),
                per_layer,
                loss_value: loss as f32,
                token_count: ex.sample.token_count() as u32,
            })
        })
        .collect::<Result<_>>()?;
    GradientManifest::new(Split::Train, model.layer_specs(), examples, model.tag(), 0)
}

/// Hessian of the mean training loss (no regulariser) by central differences
/// of the analytic gradient, symmetrised. Row-major `P × P`.
pub fn loss_hessian(model: &ToyModel, data: &ToyDataset, step: f64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("dataset is empty".into()));
    }
    model.check_shape(data)?;
    let p = model.param_count();
    let base = model.params();
    let columns: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let mut probe = model.clone();
            let mut theta = base.clone();
            theta[j] = base[j] + step;
            probe.set_params(&theta);
            let (_, plus) = mean_loss_and_grad(&probe, data);
            theta[j] = base[j] - step;
            probe.set_params(&theta);
            let (_, minus) = mean_loss_and_grad(&probe, data);
            plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * step)).collect()
        })
        .collect();
    let mut h = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            h[i * p + j] = 0.5 * (columns[j][i] + columns[i][j]);
        }
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("finite-difference Hessian".into()));
    }
    Ok(h)
}

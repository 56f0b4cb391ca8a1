//! Influence of training examples on validation loss.
//!
//! Three estimators share one sign convention,
//! `I(z, z') = −∇ℓ(z')ᵀ · H̃⁻¹ · ∇ℓ(z)`, so that negative values mark
//! proponents (their inclusion lowers validation loss):
//!
//! * `exact`: `H̃ = H + λI` with a caller-supplied Hessian, solved once per
//!   validation gradient.
//! * `identity`: `H̃ = I`, a plain gradient dot product.
//! * `datainf`: a layer-wise approximation that swaps inversion and averaging,
//!   applying the Sherman–Morrison identity to each rank-one term
//!   `g gᵀ + λ_l I` and averaging the results. No `d_l × d_l` matrix is ever
//!   formed.
//!
//! All arithmetic runs in `f64`. Reductions over training examples run in
//! ascending `example_id` order.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient_store::{mean_gradient_f64, restrict_layers, ExampleGradient, GradientManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    Identity,
    Datainf,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Exact => "exact",
            Estimator::Identity => "identity",
            Estimator::Datainf => "datainf",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Estimator::Exact),
            "identity" => Ok(Estimator::Identity),
            "datainf" => Ok(Estimator::Datainf),
            other => Err(Error::InvalidArgument(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingMode {
    /// Use `damping_value` for every layer.
    Fixed,
    /// `λ_l = 0.1 · mean_i ‖g_{l,i}‖² / d_l` (datainf only).
    DatainfScaled,
}

impl fmt::Display for DampingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DampingMode::Fixed => "fixed",
            DampingMode::DatainfScaled => "datainf_scaled",
        })
    }
}

impl FromStr for DampingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(DampingMode::Fixed),
            "datainf_scaled" | "datainf-scaled" => Ok(DampingMode::DatainfScaled),
            other => Err(Error::InvalidArgument(format!("unknown damping mode `{other}`"))),
        }
    }
}

/// Scale factor of the `datainf_scaled` damping rule.
pub const DATAINF_DAMPING_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub estimator: Estimator,
    pub damping_mode: DampingMode,
    /// λ for `fixed` mode and for the exact estimator. Zero is only usable
    /// with `exact`.
    pub damping_value: f64,
    /// Restrict to the first `k` layers.
    pub layer_limit: Option<usize>,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Datainf,
            damping_mode: DampingMode::DatainfScaled,
            damping_value: 0.01,
            layer_limit: None,
        }
    }
}

impl InfluenceConfig {
    pub fn new(estimator: Estimator) -> Self {
        Self { estimator, ..Self::default() }
    }

    pub fn fixed(estimator: Estimator, damping: f64) -> Self {
        Self { estimator, damping_mode: DampingMode::Fixed, damping_value: damping, layer_limit: None }
    }

    pub fn with_layer_limit(mut self, k: usize) -> Self {
        self.layer_limit = Some(k);
        self
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if !(self.damping_value >= 0.0) || !self.damping_value.is_finite() {
            return Err(Error::InvalidArgument(format!("damping_value must be finite and >= 0, got {}", self.damping_value)));
        }
        if let Some(k) = self.layer_limit {
            if k == 0 || k > layer_count {
                return Err(Error::InvalidArgument(format!("layer_limit {k} outside 1..={layer_count}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub example_id: String,
    pub influence: f64,
    /// 1 = most negative influence.
    pub rank: usize,
}

/// Symmetric Hessian over all adapter parameters, in manifest layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hessian {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub values: Vec<f64>,
}

impl Hessian {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * dim {
            return Err(Error::DimensionMismatch(format!("{} values for a {dim}×{dim} Hessian", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Hessian entry".into()));
        }
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (values[i * dim + j], values[j * dim + i]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::InvalidArgument(format!("Hessian not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { dim, values })
    }

    /// Leading `n × n` principal block (the parameters of the first layers).
    pub fn leading_block(&self, n: usize) -> Hessian {
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            values.extend_from_slice(&self.values[i * self.dim..i * self.dim + n]);
        }
        Hessian { dim: n, values }
    }

    /// Principal submatrix over the parameters of the given layers, in the
    /// given order. `layer_dims` describes the full parameter layout.
    pub fn layer_block(&self, layer_dims: &[usize], layers: &[usize]) -> Result<Hessian> {
        if layer_dims.iter().sum::<usize>() != self.dim {
            return Err(Error::DimensionMismatch(format!("layer dims {layer_dims:?} vs Hessian dim {}", self.dim)));
        }
        let mut offsets = vec![0; layer_dims.len()];
        for l in 1..layer_dims.len() {
            offsets[l] = offsets[l - 1] + layer_dims[l - 1];
        }
        let mut idx = Vec::new();
        for &l in layers {
            let d = *layer_dims.get(l).ok_or_else(|| Error::InvalidArgument(format!("layer {l} out of range")))?;
            idx.extend(offsets[l]..offsets[l] + d);
        }
        let values = idx.iter().flat_map(|&i| idx.iter().map(move |&j| self.values[i * self.dim + j])).collect();
        Ok(Hessian { dim: idx.len(), values })
    }

    fn damped(&self, damping: f64) -> DMatrix<f64> {
        let mut m = DMatrix::from_row_slice(self.dim, self.dim, &self.values);
        for i in 0..self.dim {
            m[(i, i)] += damping;
        }
        m
    }
}

const NULL_TOLERANCE: f64 = 1e-9;
const NULL_LEAK: f64 = 1e-5;

/// Solves `(H + λI) x = v`.
pub fn solve_damped(hessian: &Hessian, damping: f64, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != hessian.dim {
        return Err(Error::DimensionMismatch(format!("gradient of dim {} vs Hessian of dim {}", v.len(), hessian.dim)));
    }
    if !(damping >= 0.0) {
        return Err(Error::InvalidArgument(format!("damping must be >= 0, got {damping}")));
    }
    let m = hessian.damped(damping);
    let eig = m.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, e| a.min(e.abs()));
    let condition = if min == 0.0 { f64::INFINITY } else { max / min };
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::SingularSystem { condition });
    }
    // Directions with negligible curvature are dropped when the right-hand
    // side has no weight on them (symmetries of the objective look like this).
    let tol = NULL_TOLERANCE * max;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut x = DVector::<f64>::zeros(hessian.dim);
    let mut null_weight = 0.0;
    for (i, &mu) in eig.eigenvalues.iter().enumerate() {
        let u = eig.eigenvectors.column(i);
        let c: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        if mu.abs() <= tol {
            null_weight += c * c;
        } else {
            x.axpy(c / mu, &u, 1.0);
        }
    }
    if null_weight.sqrt() > NULL_LEAK * norm.max(f64::MIN_POSITIVE) || x.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularSystem { condition });
    }
    Ok(x.iter().copied().collect())
}

/// Sorts by influence ascending, ties by `example_id`, and assigns ranks 1..n.
pub fn rank_records(values: Vec<(String, f64)>) -> Result<Vec<InfluenceRecord>> {
    if let Some((id, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("influence of `{id}` is {v}")));
    }
    let mut values = values;
    values.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(i, (example_id, influence))| InfluenceRecord { example_id, influence, rank: i + 1 })
        .collect())
}

fn check_grad_layers(train: &GradientManifest, v: &[Vec<f64>]) -> Result<()> {
    let dims = train.layer_dims();
    if v.len() != dims.len() || v.iter().zip(&dims).any(|(x, &d)| x.len() != d) {
        return Err(Error::LayerMismatch(format!(
            "validation gradient dims {:?} vs training dims {dims:?}",
            v.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

fn dot_f32(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * f64::from(y)).sum()
}

/// `−Σ_l ⟨w_l, g_{l}(z)⟩` for every training example, in stored order.
fn score_against(train: &GradientManifest, w: &[Vec<f64>]) -> Vec<(String, f64)> {
    train
        .examples()
        .par_iter()
        .map(|ex| {
            let s: f64 = w.iter().zip(&ex.per_layer).map(|(wl, gl)| dot_f32(wl, gl)).sum();
            (ex.example_id.clone(), -s)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Exact
// ---------------------------------------------------------------------------

pub(crate) fn exact_direction(hessian: &Hessian, damping: f64, v: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<f64> = v.iter().flatten().copied().collect();
    let x = solve_damped(hessian, damping, &flat)?;
    let mut out = Vec::with_capacity(v.len());
    let mut off = 0;
    for layer in v {
        out.push(x[off..off + layer.len()].to_vec());
        off += layer.len();
    }
    Ok(out)
}

fn exact_values(train: &GradientManifest, v: &[Vec<f64>], hessian: &Hessian, damping: f64) -> Result<Vec<(String, f64)>> {
    check_grad_layers(train, v)?;
    if hessian.dim != train.total_dim() {
        return Err(Error::DimensionMismatch(format!(
            "Hessian dim {} vs total gradient dim {}",
            hessian.dim,
            train.total_dim()
        )));
    }
    let w = exact_direction(hessian, damping, v)?;
    Ok(score_against(train, &w))
}

/// `I(z, z') = −∇ℓ(z')ᵀ (H + λI)⁻¹ ∇ℓ(z)` with one linear solve shared by all `z`.
pub fn influence_exact(
    train: &GradientManifest,
    val_grad: &ExampleGradient,
    hessian: &Hessian,
    damping: f64,
) -> Result<Vec<InfluenceRecord>> {
    rank_records(exact_values(train, &val_grad.to_f64(), hessian, damping)?)
}

// ---------------------------------------------------------------------------
// Identity
// ---------------------------------------------------------------------------

fn identity_values(train: &GradientManifest, v: &[Vec<f64>]) -> Result<Vec<(String, f64)>> {
    check_grad_layers(train, v)?;
    Ok(score_against(train, v))
}

/// `I(z, z') = −⟨∇ℓ(z'), ∇ℓ(z)⟩`.
pub fn influence_identity(train: &GradientManifest, val_grad: &ExampleGradient) -> Result<Vec<InfluenceRecord>> {
    rank_records(identity_values(train, &val_grad.to_f64())?)
}

// ---------------------------------------------------------------------------
// DataInf
// ---------------------------------------------------------------------------

/// Peak scratch usage of a datainf pass, in `f64` slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScratchStats {
    pub peak_slots: usize,
    live: usize,
}

impl ScratchStats {
    fn alloc(&mut self, n: usize) {
        self.live += n;
        self.peak_slots = self.peak_slots.max(self.live);
    }

    fn free(&mut self, n: usize) {
        self.live -= n;
    }
}

/// Per-layer damping used by datainf.
pub fn datainf_lambdas(train: &GradientManifest, cfg: &InfluenceConfig) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::EmptyInput("datainf needs at least one training example".into()));
    }
    let lambdas = match cfg.damping_mode {
        DampingMode::Fixed => vec![cfg.damping_value; train.layer_count()],
        DampingMode::DatainfScaled => {
            let order = train.id_order();
            let ex = train.examples();
            let n = ex.len() as f64;
            train
                .layers()
                .iter()
                .enumerate()
                .map(|(l, spec)| {
                    let sq: f64 = order
                        .iter()
                        .map(|&i| ex[i].per_layer[l].iter().map(|&x| f64::from(x).powi(2)).sum::<f64>())
                        .sum();
                    DATAINF_DAMPING_SCALE * sq / (n * spec.dim as f64)
                })
                .collect()
        }
    };
    if let Some(l) = lambdas.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("zero damping on layer {l} (all gradients vanish?)")));
    }
    Ok(lambdas)
}

/// Applies the datainf approximation of `(H_l + λ_l I)⁻¹` to `v`, layer by layer:
/// `(1/(n λ_l)) Σ_i [v_l − (g_{l,i}ᵀ v_l)/(λ_l + ‖g_{l,i}‖²) · g_{l,i}]`.
pub(crate) fn datainf_direction(
    train: &GradientManifest,
    lambdas: &[f64],
    v: &[Vec<f64>],
    stats: &mut ScratchStats,
) -> Vec<Vec<f64>> {
    let order = train.id_order();
    stats.alloc(order.len());
    let ex = train.examples();
    let n = order.len() as f64;
    let out = v
        .iter()
        .enumerate()
        .map(|(l, vl)| {
            let lambda = lambdas[l];
            let mut correction = vec![0.0; vl.len()];
            stats.alloc(vl.len());
            for &i in &order {
                let g = &ex[i].per_layer[l];
                let gv = dot_f32(vl, g);
                let gg: f64 = g.iter().map(|&x| f64::from(x).powi(2)).sum();
                let c = gv / (lambda + gg);
                for (acc, &gj) in correction.iter_mut().zip(g) {
                    *acc += c * f64::from(gj);
                }
            }
            vl.iter().zip(&correction).map(|(vj, cj)| (n * vj - cj) / (n * lambda)).collect()
        })
        .collect();
    stats.free(order.len());
    out
}

fn datainf_values(
    train: &GradientManifest,
    v: &[Vec<f64>],
    cfg: &InfluenceConfig,
    stats: &mut ScratchStats,
) -> Result<Vec<(String, f64)>> {
    check_grad_layers(train, v)?;
    let lambdas = datainf_lambdas(train, cfg)?;
    let w = datainf_direction(train, &lambdas, v, stats);
    Ok(score_against(train, &w))
}

/// Layer-wise Sherman–Morrison influence estimate.
pub fn influence_datainf(
    train: &GradientManifest,
    val_grad: &ExampleGradient,
    cfg: &InfluenceConfig,
) -> Result<Vec<InfluenceRecord>> {
    influence_datainf_instrumented(train, val_grad, cfg).map(|(r, _)| r)
}

/// As [`influence_datainf`], also reporting the scratch high-water mark.
pub fn influence_datainf_instrumented(
    train: &GradientManifest,
    val_grad: &ExampleGradient,
    cfg: &InfluenceConfig,
) -> Result<(Vec<InfluenceRecord>, ScratchStats)> {
    if !(cfg.damping_value > 0.0) && cfg.damping_mode == DampingMode::Fixed {
        return Err(Error::InvalidArgument("zero damping".into()));
    }
    let mut stats = ScratchStats::default();
    let values = datainf_values(train, &val_grad.to_f64(), cfg, &mut stats)?;
    Ok((rank_records(values)?, stats))
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Applies `cfg.layer_limit` to a manifest, a gradient and a Hessian.
pub(crate) fn restrict<'a>(
    train: &'a GradientManifest,
    cfg: &InfluenceConfig,
) -> Result<std::borrow::Cow<'a, GradientManifest>> {
    match cfg.layer_limit {
        Some(k) if k < train.layer_count() => Ok(std::borrow::Cow::Owned(restrict_layers(train, k)?)),
        _ => Ok(std::borrow::Cow::Borrowed(train)),
    }
}

/// Raw `(id, influence)` values for a validation direction `v` (full layer
/// structure; `cfg.layer_limit` is applied here).
pub fn influence_values(
    train: &GradientManifest,
    v: &[Vec<f64>],
    cfg: &InfluenceConfig,
    hessian: Option<&Hessian>,
) -> Result<Vec<(String, f64)>> {
    cfg.validate(train.layer_count())?;
    check_grad_layers(train, v)?;
    let train = restrict(train, cfg)?;
    let k = train.layer_count();
    let v = &v[..k];
    match cfg.estimator {
        Estimator::Identity => identity_values(&train, v),
        Estimator::Datainf => datainf_values(&train, v, cfg, &mut ScratchStats::default()),
        Estimator::Exact => {
            let h = hessian.ok_or(Error::MissingHessian("exact"))?;
            let dim = train.total_dim();
            if h.dim < dim {
                return Err(Error::DimensionMismatch(format!("Hessian dim {} < gradient dim {dim}", h.dim)));
            }
            let block;
            let h = if h.dim == dim {
                h
            } else {
                block = h.leading_block(dim);
                &block
            };
            exact_values(&train, v, h, cfg.damping_value)
        }
    }
}

/// Influence of every training example on the validation set, using the mean
/// validation gradient.
pub fn influence_against_set(
    train: &GradientManifest,
    val: &GradientManifest,
    cfg: &InfluenceConfig,
    hessian: Option<&Hessian>,
) -> Result<Vec<InfluenceRecord>> {
    train.check_compatible(val)?;
    let v = mean_gradient_f64(val)?;
    rank_records(influence_values(train, &v, cfg, hessian)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient_store::{LayerSpec, Split};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn manifest(rows: &[(&str, Vec<Vec<f32>>)]) -> GradientManifest {
        let dims: Vec<usize> = rows[0].1.iter().map(Vec::len).collect();
        let layers = dims.iter().enumerate().map(|(i, &d)| LayerSpec::new(i, format!("l{i}"), d)).collect();
        let ex = rows.iter().map(|(id, g)| ExampleGradient::new(*id, g.clone(), 0.0, 1)).collect();
        GradientManifest::new(Split::Train, layers, ex, "t", 0).unwrap()
    }

    fn random(n: usize, dims: &[usize], seed: u64) -> GradientManifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<(String, Vec<Vec<f32>>)> = (0..n)
            .map(|i| (format!("e{i:03}"), dims.iter().map(|&d| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()))
            .collect();
        let refs: Vec<(&str, Vec<Vec<f32>>)> = rows.iter().map(|(a, b)| (a.as_str(), b.clone())).collect();
        manifest(&refs)
    }

    fn value(records: &[InfluenceRecord], id: &str) -> f64 {
        records.iter().find(|r| r.example_id == id).unwrap().influence
    }

    fn quadratic() -> (GradientManifest, Hessian) {
        // ℓ(z; θ) = ½(θ − z)² at θ* = 1: ∇ℓ(0) = 1, ∇ℓ(2) = −1, H = 1.
        (manifest(&[("z0", vec![vec![1.0]]), ("z2", vec![vec![-1.0]])]), Hessian::new(1, vec![1.0]).unwrap())
    }

    #[test]
    fn exact_quadratic_closed_form() {
        let (train, h) = quadratic();
        let val = ExampleGradient::new("v", vec![vec![1.0]], 0.5, 1);
        let r = influence_exact(&train, &val, &h, 0.0).unwrap();
        assert_eq!(value(&r, "z0"), -1.0);
        assert_eq!(value(&r, "z2"), 1.0);
        assert_eq!(r[0].example_id, "z0");
        assert_eq!(r[0].rank, 1);
    }

    #[test]
    fn exact_zero_gradient_and_scaling() {
        let train = manifest(&[("a", vec![vec![0.0, 0.0]]), ("b", vec![vec![1.0, 2.0]]), ("c", vec![vec![-3.0, 0.5]])]);
        let h = Hessian::new(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let v = ExampleGradient::new("v", vec![vec![0.7, -0.2]], 0.0, 1);
        let r = influence_exact(&train, &v, &h, 0.1).unwrap();
        assert_eq!(value(&r, "a"), 0.0);
        let scaled = influence_exact(&train, &v.scaled(4.0), &h, 0.1).unwrap();
        for (x, y) in r.iter().zip(&scaled) {
            assert_eq!(x.example_id, y.example_id);
            assert!((4.0 * x.influence - y.influence).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_singular_system_reports_condition() {
        let (train, _) = quadratic();
        let h = Hessian::new(1, vec![0.0]).unwrap();
        let v = ExampleGradient::new("v", vec![vec![1.0]], 0.0, 1);
        assert!(matches!(influence_exact(&train, &v, &h, 0.0), Err(Error::SingularSystem { .. })));
    }

    #[test]
    fn identity_cases() {
        let train = manifest(&[("a", vec![vec![1.0, 0.0]]), ("b", vec![vec![0.0, 1.0]]), ("c", vec![vec![1.0, 1.0]])]);
        let v = ExampleGradient::new("v", vec![vec![1.0, 1.0]], 0.0, 1);
        let r = influence_identity(&train, &v).unwrap();
        assert_eq!(value(&r, "a"), -1.0);
        assert_eq!(value(&r, "c"), -2.0);
        let orth = ExampleGradient::new("v", vec![vec![0.0, 3.0]], 0.0, 1);
        assert_eq!(value(&influence_identity(&train, &orth).unwrap(), "a"), 0.0);
    }

    #[test]
    fn identity_mismatched_layers() {
        let train = manifest(&[("a", vec![vec![1.0, 0.0]])]);
        let v = ExampleGradient::new("v", vec![vec![1.0, 1.0, 1.0]], 0.0, 1);
        assert!(matches!(influence_identity(&train, &v), Err(Error::LayerMismatch(_))));
    }

    #[test]
    fn datainf_hand_evaluation() {
        // n = 1, d = 1, g = 1, v = 1, λ = 1: (1/1)(1 − 1/(1+1)) = 0.5, influence −0.5.
        let train = manifest(&[("a", vec![vec![1.0]])]);
        let v = ExampleGradient::new("v", vec![vec![1.0]], 0.0, 1);
        let r = influence_datainf(&train, &v, &InfluenceConfig::fixed(Estimator::Datainf, 1.0)).unwrap();
        assert_eq!(r[0].influence, -0.5);

        let orth_train = manifest(&[("a", vec![vec![1.0, 0.0]])]);
        let orth = ExampleGradient::new("v", vec![vec![0.0, 2.0]], 0.0, 1);
        let r = influence_datainf(&orth_train, &orth, &InfluenceConfig::fixed(Estimator::Datainf, 0.3)).unwrap();
        assert_eq!(r[0].influence, 0.0);
    }

    /// The datainf term for one layer equals an explicit average of
    /// `(g gᵀ + λI)⁻¹ v` computed with a dense inverse.
    #[test]
    fn datainf_matches_dense_rank_one_inverses() {
        let train = random(7, &[3, 2], 1);
        let v = vec![vec![0.3, -1.2, 0.8], vec![0.5, 0.1]];
        let cfg = InfluenceConfig::default();
        let lambdas = datainf_lambdas(&train, &cfg).unwrap();
        let w = datainf_direction(&train, &lambdas, &v, &mut ScratchStats::default());
        for (l, &lambda) in lambdas.iter().enumerate() {
            let d = v[l].len();
            let mut avg = DVector::<f64>::zeros(d);
            for ex in train.examples() {
                let g = DVector::from_iterator(d, ex.per_layer[l].iter().map(|&x| f64::from(x)));
                let m = &g * g.transpose() + DMatrix::identity(d, d) * lambda;
                avg += m.try_inverse().unwrap() * DVector::from_column_slice(&v[l]);
            }
            avg /= train.len() as f64;
            for j in 0..d {
                assert!((avg[j] - w[l][j]).abs() < 1e-9 * (1.0 + avg[j].abs()));
            }
        }
    }

    #[test]
    fn datainf_scaled_lambda_formula() {
        let train = manifest(&[("a", vec![vec![1.0, 1.0]]), ("b", vec![vec![2.0, 0.0]])]);
        let l = datainf_lambdas(&train, &InfluenceConfig::default()).unwrap();
        // 0.1 · (2 + 4) / (2 · 2)
        assert!((l[0] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn datainf_zero_gradients_error() {
        let train = manifest(&[("a", vec![vec![0.0]])]);
        let v = ExampleGradient::new("v", vec![vec![1.0]], 0.0, 1);
        assert!(influence_datainf(&train, &v, &InfluenceConfig::default()).is_err());
    }

    #[test]
    fn scratch_grows_linearly() {
        let cfg = InfluenceConfig::default();
        let mut peaks = vec![];
        for &(n, d) in &[(50usize, 10usize), (50, 40), (50, 160)] {
            let train = random(n, &[d, d], 3);
            let v = ExampleGradient::new("v", vec![vec![0.1; d], vec![0.2; d]], 0.0, 1);
            let (_, stats) = influence_datainf_instrumented(&train, &v, &cfg).unwrap();
            assert!(stats.peak_slots <= n + 2 * d, "peak {} for d={d}", stats.peak_slots);
            peaks.push(stats.peak_slots);
        }
        assert!(peaks[2] < 4 * peaks[0] + 200);
    }

    #[test]
    fn rank_records_cases() {
        let r = rank_records(vec![("a".into(), -2.0), ("b".into(), 0.0), ("c".into(), 1.0)]).unwrap();
        assert_eq!(r.iter().map(|x| (x.example_id.as_str(), x.rank)).collect::<Vec<_>>(), vec![("a", 1), ("b", 2), ("c", 3)]);
        let rev = rank_records(vec![("c".into(), 1.0), ("b".into(), 0.0), ("a".into(), -2.0)]).unwrap();
        assert_eq!(r, rev);
        let ties = rank_records(vec![("z".into(), 1.0), ("m".into(), 1.0), ("a".into(), 1.0)]).unwrap();
        assert_eq!(ties.iter().map(|x| x.example_id.as_str()).collect::<Vec<_>>(), vec!["a", "m", "z"]);
        assert!(matches!(rank_records(vec![("a".into(), f64::NAN)]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn against_set_cases() {
        let (train, h) = quadratic();
        let cfg = InfluenceConfig::fixed(Estimator::Exact, 1e-12);
        let one = manifest(&[("v0", vec![vec![1.0]])]).with_split(Split::Validation);
        let set = influence_against_set(&train, &one, &cfg, Some(&h)).unwrap();
        let single = influence_exact(&train, &one.examples()[0], &h, 1e-12).unwrap();
        assert_eq!(set, single);

        let dup = manifest(&[("v0", vec![vec![1.0]]), ("v1", vec![vec![1.0]])]);
        assert_eq!(influence_against_set(&train, &dup, &cfg, Some(&h)).unwrap(), set);

        // val {0, 2} at θ* = 1 has gradients {1, −1}: the mean is zero.
        let sym = manifest(&[("v0", vec![vec![1.0]]), ("v2", vec![vec![-1.0]])]);
        for r in influence_against_set(&train, &sym, &cfg, Some(&h)).unwrap() {
            assert_eq!(r.influence, 0.0);
        }
        assert!(matches!(influence_against_set(&train, &sym, &cfg, None), Err(Error::MissingHessian(_))));
    }

    #[test]
    fn against_set_is_mean_of_pointwise_for_every_estimator() {
        let train = random(12, &[4, 3], 5);
        let val = random(5, &[4, 3], 6);
        let p = train.total_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..p * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        // H = AᵀA is symmetric positive semi-definite.
        let mut hv = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                hv[i * p + j] = (0..p).map(|k| a[k * p + i] * a[k * p + j]).sum();
            }
        }
        let h = Hessian::new(p, hv).unwrap();
        for cfg in [
            InfluenceConfig::fixed(Estimator::Exact, 0.1),
            InfluenceConfig::new(Estimator::Identity),
            InfluenceConfig::default(),
        ] {
            let set = influence_against_set(&train, &val, &cfg, Some(&h)).unwrap();
            for r in &set {
                let mut acc = 0.0;
                for v in val.examples() {
                    let vals = influence_values(&train, &v.to_f64(), &cfg, Some(&h)).unwrap();
                    acc += vals.iter().find(|(id, _)| *id == r.example_id).unwrap().1;
                }
                acc /= val.len() as f64;
                assert!((acc - r.influence).abs() < 1e-9 * (1.0 + acc.abs()), "{:?}", cfg.estimator);
            }
        }
    }

    #[test]
    fn layer_limit_matches_restricted_manifest() {
        let train = random(10, &[3, 4, 2], 7);
        let val = random(4, &[3, 4, 2], 8);
        for est in [Estimator::Identity, Estimator::Datainf] {
            let cfg = InfluenceConfig::new(est);
            let limited = influence_against_set(&train, &val, &cfg.clone().with_layer_limit(2), None).unwrap();
            let restricted =
                influence_against_set(&restrict_layers(&train, 2).unwrap(), &restrict_layers(&val, 2).unwrap(), &cfg, None)
                    .unwrap();
            assert_eq!(limited, restricted);
        }
    }

    #[test]
    fn large_damping_approaches_scaled_identity() {
        let train = random(15, &[3, 3], 11);
        let val = random(3, &[3, 3], 12);
        let lambda = 1e6;
        let id = influence_against_set(&train, &val, &InfluenceConfig::new(Estimator::Identity), None).unwrap();
        let di = influence_against_set(&train, &val, &InfluenceConfig::fixed(Estimator::Datainf, lambda), None).unwrap();
        let p = train.total_dim();
        let h = Hessian::new(p, (0..p * p).map(|k| if k % (p + 1) == 0 { 2.0 } else { 0.0 }).collect()).unwrap();
        let ex = influence_against_set(&train, &val, &InfluenceConfig::fixed(Estimator::Exact, lambda), Some(&h)).unwrap();
        for other in [&di, &ex] {
            assert_eq!(
                id.iter().map(|r| &r.example_id).collect::<Vec<_>>(),
                other.iter().map(|r| &r.example_id).collect::<Vec<_>>()
            );
            for (a, b) in id.iter().zip(other.iter()) {
                assert!((a.influence / lambda - b.influence).abs() < 1e-5 * (a.influence / lambda).abs() + 1e-15);
            }
        }
    }
}

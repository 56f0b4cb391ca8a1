//! Test-time coverage: how strongly the training set, reduced to its mean
//! gradient, supports each unseen test point.
//!
//! The roles of the influence formula are swapped: the averaged training set
//! plays the training point and each test point plays the validation point.
//! Negative scores mean the training set is a proponent of the test point
//! (covered), positive scores mean it is an opponent.
//!
//! The identity estimator needs nothing beyond the cached mean. The exact and
//! datainf estimators also depend on every training gradient through the
//! Hessian term, so the cache can carry a surrogate for them: the Hessian
//! itself, or the per-example gradients and per-layer λ used by datainf.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient_store::{
    check_layers_match, mean_gradient, read_manifest, restrict_layers, write_manifest, ExampleGradient,
    GradientManifest, LayerSpec, Split,
};
use crate::influence::{
    datainf_direction, datainf_lambdas, exact_direction, rank_records, Estimator, Hessian, InfluenceConfig,
    InfluenceRecord, ScratchStats,
};
use crate::stats;

pub const DEFAULT_LENGTH_BIAS_THRESHOLD: f64 = 0.3;

/// What a Hessian-bearing estimator needs besides the mean.
#[derive(Clone, Debug, PartialEq)]
pub enum Surrogate {
    None,
    Exact { hessian: Hessian },
    Datainf { lambdas: Vec<f64>, train: GradientManifest },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCache {
    pub model_tag: String,
    pub train_mean: ExampleGradient,
    pub layers: Vec<LayerSpec>,
    pub n_train: usize,
    pub created_at: u64,
    pub surrogate: Surrogate,
}

/// Averages the training gradients once.
pub fn build_cache(train: &GradientManifest) -> Result<GradientCache> {
    if train.is_empty() {
        return Err(Error::EmptyInput("cannot cache an empty training manifest".into()));
    }
    Ok(GradientCache {
        model_tag: train.model_tag().to_string(),
        train_mean: mean_gradient(train)?,
        layers: train.layers().to_vec(),
        n_train: train.len(),
        created_at: train.created_at(),
        surrogate: Surrogate::None,
    })
}

/// Builds the cache together with the surrogate `cfg.estimator` needs.
pub fn build_cache_for(train: &GradientManifest, cfg: &InfluenceConfig, hessian: Option<&Hessian>) -> Result<GradientCache> {
    let mut cache = build_cache(train)?;
    cache.surrogate = match cfg.estimator {
        Estimator::Identity => Surrogate::None,
        Estimator::Exact => {
            let h = hessian.ok_or(Error::MissingHessian("exact"))?;
            if h.dim != train.total_dim() {
                return Err(Error::DimensionMismatch(format!("Hessian dim {} vs gradient dim {}", h.dim, train.total_dim())));
            }
            Surrogate::Exact { hessian: h.clone() }
        }
        Estimator::Datainf => Surrogate::Datainf { lambdas: datainf_lambdas(train, cfg)?, train: train.clone() },
    };
    Ok(cache)
}

fn dot(a: &[Vec<f64>], b: &[Vec<f32>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, &q)| p * f64::from(q)).sum::<f64>()).sum()
}

fn check_grad(cache: &GradientCache, g: &ExampleGradient) -> Result<()> {
    let dims: Vec<usize> = cache.layers.iter().map(|l| l.dim).collect();
    if g.per_layer.len() != dims.len() || g.per_layer.iter().zip(&dims).any(|(v, &d)| v.len() != d) {
        return Err(Error::LayerMismatch(format!(
            "test gradient `{}` has dims {:?}, cache has {dims:?}",
            g.example_id,
            g.per_layer.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Influence of the averaged training set on one test point.
///
/// `train` is only consulted by datainf when the cache carries no surrogate;
/// the identity estimator never touches it.
pub fn coverage_score(
    cache: &GradientCache,
    test_grad: &ExampleGradient,
    cfg: &InfluenceConfig,
    train: Option<&GradientManifest>,
) -> Result<f64> {
    check_grad(cache, test_grad)?;
    cfg.validate(cache.layers.len())?;
    let k = cfg.layer_limit.unwrap_or(cache.layers.len());
    let v: Vec<Vec<f64>> = test_grad.per_layer[..k].iter().map(|l| l.iter().map(|&x| f64::from(x)).collect()).collect();
    let mean = &cache.train_mean.per_layer[..k];
    let w = match cfg.estimator {
        Estimator::Identity => v,
        Estimator::Exact => {
            let Surrogate::Exact { hessian } = &cache.surrogate else {
                return Err(Error::MissingHessian("exact"));
            };
            let dims: Vec<usize> = cache.layers.iter().map(|l| l.dim).collect();
            let block = hessian.layer_block(&dims, &(0..k).collect::<Vec<_>>())?;
            exact_direction(&block, cfg.damping_value, &v)?
        }
        Estimator::Datainf => {
            let (lambdas, manifest) = match (&cache.surrogate, train) {
                (Surrogate::Datainf { lambdas, train }, _) if k == cache.layers.len() => (lambdas.clone(), Cow::Borrowed(train)),
                (Surrogate::Datainf { train, .. }, _) | (_, Some(train)) => {
                    if train.model_tag() != cache.model_tag {
                        return Err(Error::StaleCache { cache_tag: cache.model_tag.clone(), test_tag: train.model_tag().into() });
                    }
                    let t = if k == train.layer_count() { Cow::Borrowed(train) } else { Cow::Owned(restrict_layers(train, k)?) };
                    (datainf_lambdas(&t, cfg)?, t)
                }
                _ => return Err(Error::MissingTrainManifest("datainf")),
            };
            datainf_direction(&manifest, &lambdas, &v, &mut ScratchStats::default())
        }
    };
    let score = -dot(&w, mean);
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("coverage of `{}`", test_grad.example_id)));
    }
    Ok(score)
}

/// Scores every test point, in `example_id` order.
pub fn coverage_scores(
    cache: &GradientCache,
    test: &GradientManifest,
    cfg: &InfluenceConfig,
    train: Option<&GradientManifest>,
) -> Result<Vec<(String, f64)>> {
    check_fresh(cache, test)?;
    let order = test.id_order();
    let ex = test.examples();
    order
        .par_iter()
        .map(|&i| Ok((ex[i].example_id.clone(), coverage_score(cache, &ex[i], cfg, train)?)))
        .collect()
}

fn check_fresh(cache: &GradientCache, test: &GradientManifest) -> Result<()> {
    if cache.model_tag != test.model_tag() {
        return Err(Error::StaleCache { cache_tag: cache.model_tag.clone(), test_tag: test.model_tag().into() });
    }
    check_layers_match(&cache.layers, test.layers())
}

/// Mean cosine similarity between the test embedding and each training embedding.
pub fn similarity_baseline(train_embeddings: &[Vec<f64>], test_embedding: &[f64]) -> Result<f64> {
    if train_embeddings.is_empty() {
        return Err(Error::EmptyInput("no training embeddings".into()));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tn = norm(test_embedding);
    if tn == 0.0 {
        return Err(Error::InvalidArgument("test embedding has zero norm".into()));
    }
    let mut total = 0.0;
    for (i, e) in train_embeddings.iter().enumerate() {
        if e.len() != test_embedding.len() {
            return Err(Error::DimensionMismatch(format!("embedding {i} has dim {}, test has {}", e.len(), test_embedding.len())));
        }
        let n = norm(e);
        if n == 0.0 {
            return Err(Error::InvalidArgument(format!("training embedding {i} has zero norm")));
        }
        let cos: f64 = e.iter().zip(test_embedding).map(|(a, b)| a * b).sum::<f64>() / (n * tn);
        total += cos;
    }
    Ok((total / train_embeddings.len() as f64).clamp(-1.0, 1.0))
}

/// Caller-supplied surface representations for the similarity baseline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub train: Vec<Vec<f64>>,
    pub test: HashMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub test_id: String,
    pub influence: f64,
    /// Ascending: 1 = most covered.
    pub influence_rank: usize,
    pub similarity: Option<f64>,
    pub similarity_rank: Option<usize>,
    pub loss: f64,
    pub token_count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Ordered by `test_id`.
    pub rows: Vec<CoverageRow>,
    /// Pearson correlation of influence rank against loss. `None` when the
    /// signal or the loss is constant.
    pub influence_loss_corr: Option<f64>,
    pub similarity_loss_corr: Option<f64>,
    /// Spearman correlation of the raw values against loss.
    pub influence_loss_spearman: Option<f64>,
    pub similarity_loss_spearman: Option<f64>,
    /// `(slope, intercept)` of loss regressed on rank.
    pub influence_regression: Option<(f64, f64)>,
    pub similarity_regression: Option<(f64, f64)>,
}

pub fn coverage_report(
    cache: &GradientCache,
    test: &GradientManifest,
    losses: &[(String, f64)],
    cfg: &InfluenceConfig,
    train: Option<&GradientManifest>,
    embeddings: Option<&Embeddings>,
) -> Result<CoverageReport> {
    if test.is_empty() {
        return Err(Error::EmptyInput("no test points".into()));
    }
    let loss_of: HashMap<&str, f64> = losses.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let scores = coverage_scores(cache, test, cfg, train)?;
    let tokens: HashMap<&str, u32> = test.examples().iter().map(|e| (e.example_id.as_str(), e.token_count)).collect();

    let loss: Vec<f64> = scores
        .iter()
        .map(|(id, _)| loss_of.get(id.as_str()).copied().ok_or_else(|| Error::InvalidArgument(format!("no loss for test point `{id}`"))))
        .collect::<Result<_>>()?;
    if let Some(l) = loss.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("test loss {l}")));
    }
    let influence: Vec<f64> = scores.iter().map(|(_, s)| *s).collect();
    let similarity: Option<Vec<f64>> = embeddings
        .map(|e| {
            scores
                .iter()
                .map(|(id, _)| {
                    let t = e.test.get(id).ok_or_else(|| Error::InvalidArgument(format!("no embedding for test point `{id}`")))?;
                    similarity_baseline(&e.train, t)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .transpose()?;

    let inf_ranks = ranks_of(&scores)?;
    let sim_ranks = similarity
        .as_ref()
        .map(|s| ranks_of(&scores.iter().map(|(id, _)| id.clone()).zip(s.iter().copied()).collect::<Vec<_>>()))
        .transpose()?;

    let rows = scores
        .iter()
        .enumerate()
        .map(|(i, (id, inf))| CoverageRow {
            test_id: id.clone(),
            influence: *inf,
            influence_rank: inf_ranks[i],
            similarity: similarity.as_ref().map(|s| s[i]),
            similarity_rank: sim_ranks.as_ref().map(|r| r[i]),
            loss: loss[i],
            token_count: tokens[id.as_str()],
        })
        .collect();

    let signal = |values: &[f64], ranks: &[usize]| {
        let r: Vec<f64> = ranks.iter().map(|&x| x as f64).collect();
        if is_constant(values) {
            (None, None, None)
        } else {
            (stats::pearson(&r, &loss), stats::spearman(values, &loss), stats::ols(&r, &loss))
        }
    };
    let (influence_loss_corr, influence_loss_spearman, influence_regression) = signal(&influence, &inf_ranks);
    let (similarity_loss_corr, similarity_loss_spearman, similarity_regression) = match (&similarity, &sim_ranks) {
        (Some(s), Some(r)) => signal(s, r),
        _ => (None, None, None),
    };
    Ok(CoverageReport {
        rows,
        influence_loss_corr,
        similarity_loss_corr,
        influence_loss_spearman,
        similarity_loss_spearman,
        influence_regression,
        similarity_regression,
    })
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Ascending ranks (ties by id), returned in the input order.
fn ranks_of(values: &[(String, f64)]) -> Result<Vec<usize>> {
    let ranked = rank_records(values.to_vec())?;
    let by_id: HashMap<&str, usize> = ranked.iter().map(|r| (r.example_id.as_str(), r.rank)).collect();
    Ok(values.iter().map(|(id, _)| by_id[id.as_str()]).collect())
}

impl CoverageReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["test_id", "influence", "influence_rank", "similarity", "similarity_rank", "loss", "token_count"])?;
        let opt = |x: Option<String>| x.unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.test_id.clone(),
                r.influence.to_string(),
                r.influence_rank.to_string(),
                opt(r.similarity.map(|x| x.to_string())),
                opt(r.similarity_rank.map(|x| x.to_string())),
                r.loss.to_string(),
                r.token_count.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    /// Scatter data `signal,rank,loss` for both signals.
    pub fn write_scatter_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["signal", "rank", "loss"])?;
        for r in &self.rows {
            out.write_record(["influence".to_string(), r.influence_rank.to_string(), r.loss.to_string()])?;
        }
        for r in &self.rows {
            if let Some(rank) = r.similarity_rank {
                out.write_record(["similarity".to_string(), rank.to_string(), r.loss.to_string()])?;
            }
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBias {
    pub spearman: f64,
    pub threshold: f64,
    pub warning: bool,
}

/// Spearman correlation between `|influence|` and sequence length.
pub fn length_bias_diagnostic(records: &[InfluenceRecord], token_counts: &[(String, u32)]) -> Result<f64> {
    let lengths: HashMap<&str, u32> = token_counts.iter().map(|(id, n)| (id.as_str(), *n)).collect();
    if records.len() < 2 {
        return Err(Error::InvalidArgument("length bias needs at least two records".into()));
    }
    let mut abs = Vec::with_capacity(records.len());
    let mut len = Vec::with_capacity(records.len());
    for r in records {
        let n = lengths
            .get(r.example_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no token count for `{}`", r.example_id)))?;
        abs.push(r.influence.abs());
        len.push(f64::from(*n));
    }
    if is_constant(&len) {
        return Err(Error::InvalidArgument("all sequence lengths are equal".into()));
    }
    stats::spearman(&abs, &len).ok_or_else(|| Error::InvalidArgument("all |influence| values are equal".into()))
}

pub fn length_bias(records: &[InfluenceRecord], token_counts: &[(String, u32)], threshold: f64) -> Result<LengthBias> {
    let spearman = length_bias_diagnostic(records, token_counts)?;
    Ok(LengthBias { spearman, threshold, warning: spearman.abs() > threshold })
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SurrogateMeta {
    None,
    Exact { hessian: Hessian },
    Datainf { lambdas: Vec<f64>, manifest: String },
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    n_train: usize,
    surrogate: SurrogateMeta,
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cache_meta_path(path: &Path) -> PathBuf {
    suffixed(path, ".cache.json")
}

/// Writes the mean as a one-example `train-mean` manifest at `path`, plus a
/// `.cache.json` sidecar and, for datainf, the training gradients next to it.
pub fn write_cache(cache: &GradientCache, path: &Path) -> Result<()> {
    let mean = GradientManifest::new(
        Split::TrainMean,
        cache.layers.clone(),
        vec![cache.train_mean.clone()],
        cache.model_tag.clone(),
        cache.created_at,
    )?;
    write_manifest(&mean, path)?;
    let surrogate = match &cache.surrogate {
        Surrogate::None => SurrogateMeta::None,
        Surrogate::Exact { hessian } => SurrogateMeta::Exact { hessian: hessian.clone() },
        Surrogate::Datainf { lambdas, train } => {
            let p = suffixed(path, ".train.bin");
            write_manifest(train, &p)?;
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            SurrogateMeta::Datainf { lambdas: lambdas.clone(), manifest: name }
        }
    };
    let meta = CacheMeta { n_train: cache.n_train, surrogate };
    let p = cache_meta_path(path);
    fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&p, e))
}

pub fn read_cache(path: &Path) -> Result<GradientCache> {
    let mean = read_manifest(path)?;
    if mean.split() != Split::TrainMean || mean.len() != 1 {
        return Err(Error::CorruptHeader(format!(
            "{} is not a cache (split {}, {} examples)",
            path.display(),
            mean.split(),
            mean.len()
        )));
    }
    let p = cache_meta_path(path);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: CacheMeta = serde_json::from_str(&text)?;
    if meta.n_train == 0 {
        return Err(Error::CorruptHeader("cache records n_train = 0".into()));
    }
    let surrogate = match meta.surrogate {
        SurrogateMeta::None => Surrogate::None,
        SurrogateMeta::Exact { hessian } => Surrogate::Exact { hessian: Hessian::new(hessian.dim, hessian.values)? },
        SurrogateMeta::Datainf { lambdas, manifest } => {
            let dir = path.parent().unwrap_or(Path::new("."));
            let train = read_manifest(&dir.join(manifest))?;
            check_layers_match(mean.layers(), train.layers())?;
            Surrogate::Datainf { lambdas, train }
        }
    };
    Ok(GradientCache {
        model_tag: mean.model_tag().to_string(),
        layers: mean.layers().to_vec(),
        train_mean: mean.examples()[0].clone(),
        n_train: meta.n_train,
        created_at: mean.created_at(),
        surrogate,
    })
}

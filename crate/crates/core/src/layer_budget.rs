//! Choosing how many layers to use for influence estimation.
//!
//! Each candidate `k` restricts the gradients to the first `k` layers. Its
//! ranking is compared with the all-layer ranking by Spearman's ρ and scored by
//! the memory efficiency `s = ρ / k`. The chosen `k` maximises `s` among the
//! candidates whose gradient payload fits the budget.
//!
//! Memory is the gradient payload an influence pass must hold:
//! `n · Σ_{l<k} dim_l · 4` bytes plus [`PER_EXAMPLE_OVERHEAD_BYTES`] per example
//! (the stored loss and token count). For `k = L` this is exactly the size of
//! the binary manifest minus its header and id bytes.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient_store::{select_layers, GradientManifest, PER_EXAMPLE_OVERHEAD_BYTES};
use crate::influence::{influence_against_set, Hessian, InfluenceConfig, InfluenceRecord};

/// `ρ = 1 − 6·Σd² / (n(n²−1))` over the integer ranks stored in the records.
pub fn spearman_rho(a: &[InfluenceRecord], b: &[InfluenceRecord]) -> Result<f64> {
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("spearman_rho needs at least 2 records, got {n}")));
    }
    if b.len() != n {
        return Err(Error::InvalidArgument(format!("rankings have {n} and {} records", b.len())));
    }
    let ranks_a = rank_map(a)?;
    let ranks_b = rank_map(b)?;
    let mut sum_d2: u128 = 0;
    for (id, &ra) in &ranks_a {
        let rb = *ranks_b
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("`{id}` missing from the second ranking")))?;
        let d = ra.abs_diff(rb) as u128;
        sum_d2 += d * d;
    }
    let n = n as u128;
    let rho = 1.0 - (6 * sum_d2) as f64 / (n * (n * n - 1)) as f64;
    Ok(rho.clamp(-1.0, 1.0))
}

fn rank_map(records: &[InfluenceRecord]) -> Result<HashMap<&str, usize>> {
    let n = records.len();
    let mut seen = vec![false; n];
    let mut map = HashMap::with_capacity(n);
    for r in records {
        if r.rank == 0 || r.rank > n || std::mem::replace(&mut seen[r.rank - 1], true) {
            return Err(Error::UnrankedInput(format!("rank {} of `{}` is not part of a permutation of 1..={n}", r.rank, r.example_id)));
        }
        if map.insert(r.example_id.as_str(), r.rank).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate example_id `{}`", r.example_id)));
        }
    }
    Ok(map)
}

/// Gradient payload bytes for the first `k` layers.
pub fn estimate_memory(manifest: &GradientManifest, k: usize) -> Result<u64> {
    let dims = manifest.layer_dims();
    if k == 0 || k > dims.len() {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", dims.len())));
    }
    Ok(memory_for_dims(manifest.len(), &dims[..k]))
}

fn memory_for_dims(n: usize, dims: &[usize]) -> u64 {
    let floats: u64 = dims.iter().map(|&d| d as u64).sum();
    n as u64 * (floats * 4 + PER_EXAMPLE_OVERHEAD_BYTES)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub k: usize,
    pub rho: f64,
    pub memory_bytes: u64,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBudgetReport {
    /// Ascending in `k`.
    pub entries: Vec<BudgetEntry>,
    pub chosen_k: usize,
    pub budget_bytes: u64,
    pub min_rho: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Entries with a lower ρ are not eligible.
    pub min_rho: Option<f64>,
    /// Profile on a seeded random subset of this many training examples.
    /// Memory is still estimated for the full training set.
    pub subset: Option<usize>,
    pub subset_seed: u64,
}

/// Profiles `ks` (first-k restrictions) against the all-layer ranking.
pub fn profile_layer_budget(
    train: &GradientManifest,
    val: &GradientManifest,
    cfg: &InfluenceConfig,
    hessian: Option<&Hessian>,
    ks: &[usize],
    budget_bytes: u64,
) -> Result<LayerBudgetReport> {
    profile_layer_budget_with(train, val, cfg, hessian, ks, budget_bytes, &ProfileOptions::default())
}

pub fn profile_layer_budget_with(
    train: &GradientManifest,
    val: &GradientManifest,
    cfg: &InfluenceConfig,
    hessian: Option<&Hessian>,
    ks: &[usize],
    budget_bytes: u64,
    opts: &ProfileOptions,
) -> Result<LayerBudgetReport> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("ks is empty".into()));
    }
    let layers = train.layer_count();
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > layers) {
        return Err(Error::InvalidArgument(format!("k = {bad} outside 1..={layers}")));
    }
    let subsets: Vec<Vec<usize>> = ks.iter().map(|&k| (0..k).collect()).collect();
    let rhos = profile_rhos(train, val, cfg, hessian, &subsets, opts)?;
    let entries = ks
        .iter()
        .zip(rhos)
        .map(|(&k, rho)| BudgetEntry { k, rho, memory_bytes: memory_for_dims(train.len(), &train.layer_dims()[..k]), s: rho / k as f64 })
        .collect();
    finish(entries, budget_bytes, opts.min_rho)
}

/// ρ of arbitrary layer subsets against the all-layer ranking. Lets callers
/// test restrictions other than "first k".
pub fn profile_layer_subsets(
    train: &GradientManifest,
    val: &GradientManifest,
    cfg: &InfluenceConfig,
    hessian: Option<&Hessian>,
    subsets: &[Vec<usize>],
    opts: &ProfileOptions,
) -> Result<Vec<f64>> {
    profile_rhos(train, val, cfg, hessian, subsets, opts)
}

fn profile_rhos(
    train: &GradientManifest,
    val: &GradientManifest,
    cfg: &InfluenceConfig,
    hessian: Option<&Hessian>,
    subsets: &[Vec<usize>],
    opts: &ProfileOptions,
) -> Result<Vec<f64>> {
    train.check_compatible(val)?;
    let cfg = InfluenceConfig { layer_limit: None, ..cfg.clone() };
    let subsampled;
    let train = match opts.subset {
        Some(m) if m < train.len() => {
            subsampled = subsample(train, m, opts.subset_seed)?;
            &subsampled
        }
        _ => train,
    };
    let baseline = influence_against_set(train, val, &cfg, hessian)?;
    let dims = train.layer_dims();
    subsets
        .par_iter()
        .map(|layers| {
            if layers.len() == dims.len() && layers.iter().enumerate().all(|(i, &l)| i == l) {
                return Ok(1.0);
            }
            let t = select_layers(train, layers)?;
            let v = select_layers(val, layers)?;
            let block = hessian.map(|h| h.layer_block(&dims, layers)).transpose()?;
            let ranking = influence_against_set(&t, &v, &cfg, block.as_ref())?;
            spearman_rho(&baseline, &ranking)
        })
        .collect()
}

fn subsample(train: &GradientManifest, m: usize, seed: u64) -> Result<GradientManifest> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("subset of {m} examples is too small for a rank correlation")));
    }
    let order = train.id_order();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, order.len(), m).into_iter().map(|i| order[i]).collect();
    picked.sort_unstable();
    let ex = train.examples();
    GradientManifest::new(
        train.split(),
        train.layers().to_vec(),
        picked.into_iter().map(|i| ex[i].clone()).collect(),
        train.model_tag(),
        train.created_at(),
    )
}

fn finish(entries: Vec<BudgetEntry>, budget_bytes: u64, min_rho: Option<f64>) -> Result<LayerBudgetReport> {
    let chosen = entries
        .iter()
        .filter(|e| e.memory_bytes <= budget_bytes && min_rho.is_none_or(|m| e.rho >= m))
        .fold(None::<&BudgetEntry>, |best, e| match best {
            Some(b) if b.s >= e.s => Some(b),
            _ => Some(e),
        })
        .ok_or(Error::NoFeasibleK { budget: budget_bytes })?;
    Ok(LayerBudgetReport { chosen_k: chosen.k, entries, budget_bytes, min_rho })
}

impl LayerBudgetReport {
    pub fn entry(&self, k: usize) -> Option<&BudgetEntry> {
        self.entries.iter().find(|e| e.k == k)
    }

    /// `k,rho,memory_bytes,s,chosen`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "rho", "memory_bytes", "s", "chosen"])?;
        for e in &self.entries {
            out.write_record([
                e.k.to_string(),
                e.rho.to_string(),
                e.memory_bytes.to_string(),
                e.s.to_string(),
                (e.k == self.chosen_k).to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    /// Bar-chart data: `k` on x, `s` on y, memory as a label.
    pub fn write_plot_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "s", "memory_label"])?;
        for e in &self.entries {
            out.write_record([e.k.to_string(), e.s.to_string(), human_bytes(e.memory_bytes)])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

fn human_bytes(b: u64) -> String {
    const UNITS: [&str; 4] = ["B", "KiB", "MiB", "GiB"];
    let mut v = b as f64;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    if u == 0 { format!("{b} B") } else { format!("{v:.1} {}", UNITS[u]) }
}

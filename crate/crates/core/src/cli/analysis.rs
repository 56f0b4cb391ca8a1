use std::collections::BTreeSet;

use serde::Serialize;

use in2core::coreset::{overlap_coefficient, select_coreset_with_bins, CoresetSize, CoresetSpec, Strategy, DEFAULT_BINS};
use in2core::gradient_store::{read_manifest, restrict_layers, GradientManifest};
use in2core::influence::{datainf_lambdas, influence_against_set, Estimator, InfluenceConfig, InfluenceRecord};
use in2core::layer_budget::{estimate_memory, profile_layer_budget_with, ProfileOptions};
use in2core::{Error, Result};

use super::output::{read_records, write_bytes, write_csv, write_json, write_records, Provenance};
use super::{announce, Ctx, EstimatorFlags, InfluenceArgs, LayerBudgetArgs, SelectArgs};

/// Provenance lines describing an estimator run.
fn estimator_provenance(command: &str, cfg: &InfluenceConfig, train: &GradientManifest, val: &GradientManifest) -> Result<Provenance> {
    let mut p: Provenance = vec![
        ("command", command.into()),
        ("estimator", cfg.estimator.to_string()),
        ("damping_mode", cfg.damping_mode.to_string()),
        ("damping_value", cfg.damping_value.to_string()),
        ("layer_limit", cfg.layer_limit.map_or("all".into(), |k| k.to_string())),
    ];
    if cfg.estimator == Estimator::Datainf {
        let t = match cfg.layer_limit {
            Some(k) => restrict_layers(train, k)?,
            None => train.clone(),
        };
        let lambdas: Vec<String> = datainf_lambdas(&t, cfg)?.iter().map(f64::to_string).collect();
        p.push(("layer_lambdas", lambdas.join(" ")));
    }
    p.push(("model_tag", train.model_tag().into()));
    p.push(("n_train", train.len().to_string()));
    p.push(("n_val", val.len().to_string()));
    Ok(p)
}

struct Scored {
    records: Vec<InfluenceRecord>,
    provenance: Provenance,
}

fn score(ctx: &Ctx, command: &str, train: &Option<std::path::PathBuf>, val: &Option<std::path::PathBuf>, flags: &EstimatorFlags) -> Result<Scored> {
    let i = &ctx.cfg.inputs;
    let train = read_manifest(&ctx.input(train, &i.train, "train")?)?;
    let val = read_manifest(&ctx.input(val, &i.val, "val")?)?;
    let cfg = ctx.influence_config(flags);
    let hessian = ctx.hessian(flags)?;
    if cfg.estimator != Estimator::Exact && hessian.is_some() {
        eprintln!("warning: --hessian is only used by the exact estimator");
    }
    let records = influence_against_set(&train, &val, &cfg, hessian.as_ref())?;
    let provenance = estimator_provenance(command, &cfg, &train, &val)?;
    Ok(Scored { records, provenance })
}

pub fn influence(ctx: &Ctx, a: &InfluenceArgs) -> Result<()> {
    let s = score(ctx, "influence", &a.train, &a.val, &a.estimator)?;
    let path = ctx.path("influence.csv");
    write_records(&path, &s.provenance, &s.records)?;
    announce(&path, &format!("{} ranked influence values", s.records.len()));
    Ok(())
}

#[derive(Serialize)]
struct GroupSet<'a> {
    strategy: Strategy,
    ids: &'a [String],
}

#[derive(Serialize)]
struct Overlap {
    a: Strategy,
    b: Strategy,
    overlap: f64,
}

#[derive(Serialize)]
struct ComparisonReport<'a> {
    count: usize,
    seed: u64,
    sets: Vec<GroupSet<'a>>,
    overlaps: Vec<Overlap>,
}

pub fn select(ctx: &Ctx, a: &SelectArgs) -> Result<()> {
    let c = &ctx.cfg.select;
    let inputs = &ctx.cfg.inputs;
    let (records, mut provenance) = match ctx.optional_input(&a.influence, &inputs.influence)? {
        Some(p) => (read_records(&p)?, vec![("command", "select".to_string()), ("source", "influence csv".into())]),
        None => {
            let s = score(ctx, "select", &a.train, &a.val, &a.estimator)?;
            (s.records, s.provenance)
        }
    };
    let strategy = a.strategy.or(c.strategy).unwrap_or(Strategy::Proponents);
    let size = match (a.fraction, a.count) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --fraction or --count, not both".into())),
        (Some(f), None) => CoresetSize::Fraction(f),
        (None, Some(n)) => CoresetSize::Count(n),
        (None, None) => match (c.fraction, c.count) {
            (Some(_), Some(_)) => return Err(Error::Config("select.fraction and select.count are both set".into())),
            (Some(f), None) => CoresetSize::Fraction(f),
            (None, Some(n)) => CoresetSize::Count(n),
            (None, None) => return Err(Error::Config("missing --fraction or --count".into())),
        },
    };
    let seed = a.seed.or(c.seed).unwrap_or(0);
    let bins = a.bins.or(c.bins).unwrap_or(DEFAULT_BINS);
    let spec = CoresetSpec { strategy, size, seed };
    let result = select_coreset_with_bins(&records, &spec, bins)?;
    provenance.push(("strategy", strategy.to_string()));
    provenance.push(("selected", result.selected_ids.len().to_string()));
    provenance.push(("seed", seed.to_string()));

    let path = ctx.path("coreset.json");
    write_json(&path, &result)?;
    announce(&path, &format!("{} {strategy} of {}", result.selected_ids.len(), records.len()));
    let ids_path = ctx.path("selected_ids.txt");
    let mut ids = Vec::new();
    result.write_id_list(&mut ids).map_err(|e| Error::Io { path: ids_path.clone(), source: e })?;
    write_bytes(&ids_path, &ids)?;
    announce(&ids_path, "selected ids");
    let hist_path = ctx.path("influence_histogram.csv");
    write_csv(&hist_path, &provenance, |buf| result.stats.histogram.write_csv(buf))?;
    announce(&hist_path, &format!("{bins}-bin influence histogram"));

    if a.compare || c.compare.unwrap_or(false) {
        let count = result.selected_ids.len();
        let groups: Vec<(Strategy, Vec<String>)> = Strategy::ALL
            .into_iter()
            .map(|s| Ok((s, select_coreset_with_bins(&records, &CoresetSpec::count(s, count).with_seed(seed), bins)?.selected_ids)))
            .collect::<Result<_>>()?;
        let mut overlaps = Vec::new();
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                overlaps.push(Overlap { a: groups[i].0, b: groups[j].0, overlap: overlap_coefficient(&groups[i].1, &groups[j].1)? });
            }
        }
        let report = ComparisonReport {
            count,
            seed,
            sets: groups.iter().map(|(s, ids)| GroupSet { strategy: *s, ids }).collect(),
            overlaps,
        };
        let cpath = ctx.path("compare.json");
        write_json(&cpath, &report)?;
        announce(&cpath, &format!("4 groups of {count}, 6 overlap coefficients"));
    }
    Ok(())
}

pub fn layer_budget(ctx: &Ctx, a: &LayerBudgetArgs) -> Result<()> {
    let i = &ctx.cfg.inputs;
    let c = &ctx.cfg.layer_budget;
    let train = read_manifest(&ctx.input(&a.train, &i.train, "train")?)?;
    let val = read_manifest(&ctx.input(&a.val, &i.val, "val")?)?;
    let cfg = ctx.influence_config(&a.estimator);
    let hessian = ctx.hessian(&a.estimator)?;
    let layers = train.layer_count();
    let ks = a.ks.clone().or_else(|| c.ks.clone()).unwrap_or_else(|| (1..=layers).collect());
    let unique: BTreeSet<usize> = ks.iter().copied().collect();
    if unique.len() < ks.len() {
        eprintln!("warning: duplicate k values in {ks:?}; profiling {unique:?}");
    }
    let budget = match a.budget.or(c.budget) {
        Some(b) => b,
        None => estimate_memory(&train, layers)?,
    };
    let opts = ProfileOptions {
        min_rho: a.min_rho.or(c.min_rho),
        subset: a.subset.or(c.subset),
        subset_seed: a.subset_seed.or(c.subset_seed).unwrap_or(0),
    };
    let report = profile_layer_budget_with(&train, &val, &cfg, hessian.as_ref(), &ks, budget, &opts)?;
    let mut provenance = estimator_provenance("layer-budget", &cfg, &train, &val)?;
    provenance.push(("budget_bytes", budget.to_string()));
    provenance.push(("min_rho", opts.min_rho.map_or("none".into(), |r| r.to_string())));
    provenance.push(("subset", opts.subset.map_or("all".into(), |n| n.to_string())));
    provenance.push(("subset_seed", opts.subset_seed.to_string()));
    provenance.push(("chosen_k", report.chosen_k.to_string()));

    let path = ctx.path("layer_budget.csv");
    write_csv(&path, &provenance, |buf| report.write_csv(buf))?;
    announce(&path, &format!("{} entries, chosen k = {}", report.entries.len(), report.chosen_k));
    let jpath = ctx.path("layer_budget.json");
    write_json(&jpath, &report)?;
    announce(&jpath, "layer budget report");
    let ppath = ctx.path("layer_budget_plot.csv");
    write_csv(&ppath, &provenance, |buf| report.write_plot_csv(buf))?;
    announce(&ppath, "plot data");
    Ok(())
}

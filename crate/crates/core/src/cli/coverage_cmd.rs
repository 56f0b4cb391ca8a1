use serde::Serialize;

use in2core::coverage::{
    build_cache_for, coverage_report, coverage_scores, length_bias, read_cache, write_cache, Embeddings, GradientCache,
    LengthBias, Surrogate, DEFAULT_LENGTH_BIAS_THRESHOLD,
};
use in2core::gradient_store::{read_manifest, GradientManifest};
use in2core::influence::{rank_records, Estimator, InfluenceConfig};
use in2core::{Error, Result};

use super::output::{read_embeddings, write_csv, write_json, Provenance};
use super::{announce, CacheArgs, CoverageCommand, Ctx, ReportArgs, ScoreArgs};

pub fn run(ctx: &Ctx, cmd: CoverageCommand) -> Result<()> {
    match cmd {
        CoverageCommand::Cache(a) => cache(ctx, &a),
        CoverageCommand::Score(a) => score(ctx, &a),
        CoverageCommand::Report(a) => report(ctx, &a),
    }
}

fn cache(ctx: &Ctx, a: &CacheArgs) -> Result<()> {
    let train = read_manifest(&ctx.input(&a.train, &ctx.cfg.inputs.train, "train")?)?;
    let cfg = ctx.influence_config(&a.estimator);
    let hessian = ctx.hessian(&a.estimator)?;
    let cache = build_cache_for(&train, &cfg, hessian.as_ref())?;
    let name = a.name.clone().or_else(|| ctx.cfg.coverage.name.clone()).unwrap_or_else(|| "cache".into());
    let path = ctx.path(&format!("{name}.bin"));
    write_cache(&cache, &path)?;
    announce(&path, &format!("{} cache over {} training examples, model {}", cfg.estimator, cache.n_train, cache.model_tag));
    Ok(())
}

struct Loaded {
    cache: GradientCache,
    test: GradientManifest,
    train: Option<GradientManifest>,
    cfg: InfluenceConfig,
}

/// Reads the cache and test manifest. Without an explicit estimator the one
/// the cache was built for is used.
fn load(ctx: &Ctx, a: &ScoreArgs) -> Result<Loaded> {
    let i = &ctx.cfg.inputs;
    let cache = read_cache(&ctx.input(&a.cache, &i.cache, "cache")?)?;
    let test = read_manifest(&ctx.input(&a.test, &i.test, "test")?)?;
    let train = ctx.optional_input(&a.train, &i.train)?.map(|p| read_manifest(&p)).transpose()?;
    let mut cfg = ctx.influence_config(&a.estimator);
    if a.estimator.estimator.is_none() && ctx.cfg.influence.estimator.is_none() {
        cfg.estimator = match cache.surrogate {
            Surrogate::None => Estimator::Identity,
            Surrogate::Exact { .. } => Estimator::Exact,
            Surrogate::Datainf { .. } => Estimator::Datainf,
        };
    }
    Ok(Loaded { cache, test, train, cfg })
}

fn provenance(command: &str, l: &Loaded) -> Provenance {
    vec![
        ("command", command.into()),
        ("estimator", l.cfg.estimator.to_string()),
        ("damping_mode", l.cfg.damping_mode.to_string()),
        ("damping_value", l.cfg.damping_value.to_string()),
        ("model_tag", l.cache.model_tag.clone()),
        ("n_train", l.cache.n_train.to_string()),
        ("n_test", l.test.len().to_string()),
        ("coverage", "influence of the averaged training set; negative means well covered".into()),
    ]
}

fn score(ctx: &Ctx, a: &ScoreArgs) -> Result<()> {
    let l = load(ctx, a)?;
    let rows = coverage_scores(&l.cache, &l.test, &l.cfg, l.train.as_ref())?;
    let path = ctx.path("coverage_scores.csv");
    write_csv(&path, &provenance("coverage score", &l), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["test_id", "coverage"])?;
        for (id, s) in &rows {
            w.write_record([id.clone(), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    })?;
    for (id, s) in &rows {
        println!("{id},{s}");
    }
    announce(&path, &format!("{} coverage scores", rows.len()));
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    estimator: Estimator,
    model_tag: String,
    n_train: usize,
    n_test: usize,
    influence_loss_corr: Option<f64>,
    similarity_loss_corr: Option<f64>,
    influence_loss_spearman: Option<f64>,
    similarity_loss_spearman: Option<f64>,
    influence_regression: Option<(f64, f64)>,
    similarity_regression: Option<(f64, f64)>,
    /// Present when test sequence lengths vary.
    length_bias: Option<LengthBias>,
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let l = load(ctx, &a.score)?;
    let i = &ctx.cfg.inputs;
    let train_emb = ctx.optional_input(&a.train_embeddings, &i.train_embeddings)?;
    let test_emb = ctx.optional_input(&a.test_embeddings, &i.test_embeddings)?;
    let embeddings = match (train_emb, test_emb) {
        (Some(tr), Some(te)) => Some(Embeddings {
            train: read_embeddings(&tr)?.into_iter().map(|(_, v)| v).collect(),
            test: read_embeddings(&te)?.into_iter().collect(),
        }),
        (None, None) => None,
        _ => return Err(Error::Config("--train-embeddings and --test-embeddings go together".into())),
    };
    let losses: Vec<(String, f64)> = l.test.examples().iter().map(|e| (e.example_id.clone(), f64::from(e.loss_value))).collect();
    let r = coverage_report(&l.cache, &l.test, &losses, &l.cfg, l.train.as_ref(), embeddings.as_ref())?;

    let lengths: Vec<(String, u32)> = r.rows.iter().map(|row| (row.test_id.clone(), row.token_count)).collect();
    let varied = lengths.windows(2).any(|w| w[0].1 != w[1].1);
    let length_bias = if varied && r.rows.len() >= 2 {
        let threshold = a.length_bias_threshold.or(ctx.cfg.coverage.length_bias_threshold).unwrap_or(DEFAULT_LENGTH_BIAS_THRESHOLD);
        let records = rank_records(r.rows.iter().map(|row| (row.test_id.clone(), row.influence)).collect())?;
        match length_bias(&records, &lengths, threshold) {
            Ok(b) => {
                if b.warning {
                    eprintln!("warning: |coverage| tracks test sequence length (spearman {:.3})", b.spearman);
                }
                Some(b)
            }
            Err(Error::InvalidArgument(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let prov = provenance("coverage report", &l);
    let path = ctx.path("coverage_report.csv");
    write_csv(&path, &prov, |buf| r.write_csv(buf))?;
    announce(&path, &format!("{} test points", r.rows.len()));
    let spath = ctx.path("coverage_scatter.csv");
    write_csv(&spath, &prov, |buf| r.write_scatter_csv(buf))?;
    announce(&spath, "rank vs loss scatter data");
    let summary = Summary {
        estimator: l.cfg.estimator,
        model_tag: l.cache.model_tag.clone(),
        n_train: l.cache.n_train,
        n_test: l.test.len(),
        influence_loss_corr: r.influence_loss_corr,
        similarity_loss_corr: r.similarity_loss_corr,
        influence_loss_spearman: r.influence_loss_spearman,
        similarity_loss_spearman: r.similarity_loss_spearman,
        influence_regression: r.influence_regression,
        similarity_regression: r.similarity_regression,
        length_bias,
    };
    let jpath = ctx.path("coverage_summary.json");
    write_json(&jpath, &summary)?;
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    announce(&jpath, &format!("influence_loss_corr {}, similarity_loss_corr {}", fmt(r.influence_loss_corr), fmt(r.similarity_loss_corr)));
    Ok(())
}

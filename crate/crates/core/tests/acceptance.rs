//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line each.
//! Set `ACCEPTANCE_STRICT=1` to make any failure fail the process, and
//! `ACCEPTANCE_ONLY=2,5` to run a subset.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use in2core::coreset::{select_coreset, CoresetSpec, Strategy};
use in2core::coverage::{build_cache, build_cache_for, coverage_report, coverage_score, Embeddings};
use in2core::gradient_store::{read_manifest, restrict_layers, write_manifest, ExampleGradient, GradientManifest, LayerSpec, Split};
use in2core::influence::{influence_against_set, rank_records, Estimator, Hessian, InfluenceConfig, InfluenceRecord};
use in2core::layer_budget::{estimate_memory, profile_layer_budget, spearman_rho};
use in2core::toy::{
    example_gradient, example_loss, example_losses, generate_dataset, loo_oracle, loss_hessian, mean_loss, per_example_gradients, train,
    ClusterTask, MarkovTask, ModelConfig, Task, ToyDataset, ToyModel, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "gradient correctness", limit: Some(Duration::from_secs(60)), run: gradient_correctness },
        Criterion { id: 2, name: "oracle agreement", limit: Some(Duration::from_secs(300)), run: oracle_agreement },
        Criterion { id: 3, name: "estimator fidelity", limit: Some(Duration::from_secs(120)), run: estimator_fidelity },
        Criterion { id: 4, name: "coreset ordering", limit: Some(Duration::from_secs(600)), run: coreset_ordering },
        Criterion { id: 5, name: "more data can hurt", limit: None, run: more_data_can_hurt },
        Criterion { id: 6, name: "layer budget", limit: Some(Duration::from_secs(60)), run: layer_budget },
        Criterion { id: 7, name: "coverage correlations", limit: Some(Duration::from_secs(300)), run: coverage_correlations },
        Criterion { id: 8, name: "cache amortization", limit: None, run: cache_amortization },
        Criterion { id: 9, name: "format round-trip", limit: None, run: format_round_trip },
        Criterion { id: 10, name: "determinism", limit: None, run: determinism },
    ];
    let only: Vec<u32> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        ran += 1;
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {} [{elapsed:.1?}]: {detail}", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {} [{elapsed:.1?}]: {detail}", c.id, c.name);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    // Failures are always reported above; they only fail the process on request.
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict { ExitCode::FAILURE } else { ExitCode::SUCCESS }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn cluster(world_seed: u64) -> ClusterTask {
    ClusterTask { world_seed, ..ClusterTask::default() }
}

fn model(task: &Task, layers: usize, seed: u64) -> ToyModel {
    ToyModel::init(task, &ModelConfig { layers, seed, ..ModelConfig::default() }).unwrap()
}

/// ρ between two value lists keyed by id, via tie-broken ranks.
fn rho_of(a: Vec<(String, f64)>, b: Vec<(String, f64)>) -> f64 {
    spearman_rho(&rank_records(a).unwrap(), &rank_records(b).unwrap()).unwrap()
}

fn values(records: &[InfluenceRecord]) -> Vec<(String, f64)> {
    records.iter().map(|r| (r.example_id.clone(), r.influence)).collect()
}

fn val_manifest(m: GradientManifest) -> GradientManifest {
    m.with_split(Split::Validation)
}

// ---------------------------------------------------------------------------
// 1
// ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let tasks = [Task::cluster(), Task::MarkovNextToken(MarkovTask { max_len: 8, ..MarkovTask::default() })];
    for task in &tasks {
        for layers in 1..=3 {
            let data = generate_dataset(task, 6, 100 + layers as u64).unwrap();
            let mut m = model(task, layers, layers as u64);
            // move B away from zero so every coordinate carries signal
            let theta: Vec<f64> = m.params().iter().map(|t| t + rng.random_range(-0.5..0.5)).collect();
            m.set_params(&theta);
            for ex in &data.examples {
                let (_, grads) = example_gradient(&m, &ex.sample);
                let flat: Vec<f64> = grads.into_iter().flatten().collect();
                for j in 0..flat.len() {
                    let mut probe = m.clone();
                    let mut t = theta.clone();
                    t[j] += STEP;
                    probe.set_params(&t);
                    let plus = example_loss(&probe, &ex.sample);
                    t[j] -= 2.0 * STEP;
                    probe.set_params(&t);
                    let minus = example_loss(&probe, &ex.sample);
                    let fd = (plus - minus) / (2.0 * STEP);
                    let scale = flat[j].abs().max(fd.abs());
                    if scale <= 1e-8 {
                        continue;
                    }
                    worst = worst.max((flat[j] - fd).abs() / scale);
                    checked += 1;
                }
            }
        }
    }
    check(checked >= 1000 && worst <= TOL, format!("{checked} coordinates, max relative error {worst:.2e} (tol {TOL:.0e})"))
}

// ---------------------------------------------------------------------------
// 2
// ---------------------------------------------------------------------------

const LAMBDA: f64 = 0.01;

fn fit_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { learning_rate: 0.5, epochs, seed, l2_damping: LAMBDA, line_search: true, tolerance: 1e-9, newton_steps: 50 }
}

fn oracle_agreement() -> Outcome {
    let results: Vec<f64> = (0..5u64)
        .map(|seed| {
            let task = Task::ClusterClassification(cluster(seed));
            let train_set = generate_dataset(&task, 30, 10 + seed).unwrap();
            let val = generate_dataset(&task, 10, 20 + seed).unwrap();
            let init = model(&task, 1, seed);
            let cfg = fit_cfg(4000, seed);
            let fitted = train(&init, &train_set, &cfg).unwrap();
            let grads = per_example_gradients(&fitted, &train_set).unwrap();
            let vgrads = val_manifest(per_example_gradients(&fitted, &val).unwrap());
            let h = Hessian::new(fitted.param_count(), loss_hessian(&fitted, &train_set, 1e-5).unwrap()).unwrap();
            let inf = influence_against_set(&grads, &vgrads, &InfluenceConfig::fixed(Estimator::Exact, LAMBDA), Some(&h)).unwrap();
            let loo = loo_oracle(&train_set, &val, &cfg, &init).unwrap();
            rho_of(values(&inf), loo.into_iter().map(|(id, d)| (id, -d)).collect())
        })
        .collect();
    let passing = results.iter().filter(|&&r| r >= 0.8).count();
    check(passing >= 4, format!("rho per seed {}; {passing}/5 >= 0.8", fmt_list(&results)))
}

fn fmt_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------------------
// 3
// ---------------------------------------------------------------------------

fn estimator_fidelity() -> Outcome {
    let mut params = 0;
    let results: Vec<f64> = (0..5u64)
        .map(|seed| {
            let task = Task::ClusterClassification(cluster(seed));
            let train_set = generate_dataset(&task, 100, 30 + seed).unwrap();
            let val = generate_dataset(&task, 25, 40 + seed).unwrap();
            let fitted = train(&model(&task, 3, seed), &train_set, &fit_cfg(2000, seed)).unwrap();
            params = fitted.param_count();
            let grads = per_example_gradients(&fitted, &train_set).unwrap();
            let vgrads = val_manifest(per_example_gradients(&fitted, &val).unwrap());
            let h = Hessian::new(params, loss_hessian(&fitted, &train_set, 1e-5).unwrap()).unwrap();
            let exact = influence_against_set(&grads, &vgrads, &InfluenceConfig::fixed(Estimator::Exact, LAMBDA), Some(&h)).unwrap();
            let di = influence_against_set(&grads, &vgrads, &InfluenceConfig::default(), None).unwrap();
            spearman_rho(&exact, &di).unwrap()
        })
        .collect();
    let passing = results.iter().filter(|&&r| r >= 0.9).count();
    check(
        passing >= 4 && params <= 200,
        format!("{params} adapter parameters; rho per seed {}; {passing}/5 >= 0.9", fmt_list(&results)),
    )
}

// ---------------------------------------------------------------------------
// 4 and 5
// ---------------------------------------------------------------------------

/// Validation loss after retraining from `init` on the selected subset.
fn retrain_loss(init: &ToyModel, data: &ToyDataset, ids: &[String], val: &ToyDataset, cfg: &TrainConfig) -> f64 {
    let subset = data.subset(ids);
    mean_loss(&train(init, &subset, cfg).unwrap(), val).unwrap()
}

struct SelectionRun {
    full: f64,
    losses: Vec<(Strategy, f64)>,
}

fn selection_run(task: &Task, train_set: &ToyDataset, val: &ToyDataset, seed: u64, cfg: &TrainConfig) -> SelectionRun {
    let init = model(task, 3, seed);
    let fitted = train(&init, train_set, cfg).unwrap();
    let grads = per_example_gradients(&fitted, train_set).unwrap();
    let vgrads = val_manifest(per_example_gradients(&fitted, val).unwrap());
    let records = influence_against_set(&grads, &vgrads, &InfluenceConfig::default(), None).unwrap();
    let losses = [Strategy::Proponents, Strategy::Random, Strategy::Opponents]
        .into_iter()
        .map(|s| {
            let sel = select_coreset(&records, &CoresetSpec::fraction(s, 0.5).with_seed(seed)).unwrap();
            (s, retrain_loss(&init, train_set, &sel.selected_ids, val, cfg))
        })
        .collect();
    SelectionRun { full: mean_loss(&fitted, val).unwrap(), losses }
}

fn loss_of(run: &SelectionRun, s: Strategy) -> f64 {
    run.losses.iter().find(|(x, _)| *x == s).unwrap().1
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0);
    (m, v.sqrt())
}

fn coreset_ordering() -> Outcome {
    let runs: Vec<SelectionRun> = (0..5u64)
        .map(|seed| {
            let task = Task::ClusterClassification(ClusterTask { label_noise: 0.2, ..cluster(seed) });
            let train_set = generate_dataset(&task, 100, 50 + seed).unwrap();
            let val = generate_dataset(&task, 25, 60 + seed).unwrap();
            selection_run(&task, &train_set, &val, seed, &fit_cfg(2000, seed))
        })
        .collect();
    let col = |s| runs.iter().map(|r| loss_of(r, s)).collect::<Vec<_>>();
    let (p, sp) = mean_sd(&col(Strategy::Proponents));
    let (r, _) = mean_sd(&col(Strategy::Random));
    let (o, so) = mean_sd(&col(Strategy::Opponents));
    let pooled_se = ((sp * sp + so * so) / runs.len() as f64).sqrt();
    check(
        p <= r && r <= o && o - p >= pooled_se,
        format!("mean val loss proponents {p:.4} <= random {r:.4} <= opponents {o:.4}; gap {:.4} vs pooled SE {pooled_se:.4}", o - p),
    )
}

fn more_data_can_hurt() -> Outcome {
    let seed = 1;
    let clean = ClusterTask { world_seed: seed, ..ClusterTask::default() };
    let contaminated = ClusterTask { shift: 2.0, label_rotation: 1, ..clean.clone() };
    let task = Task::ClusterClassification(clean.clone());
    let train_set = generate_dataset(&task, 80, 70)
        .unwrap()
        .concat(&generate_dataset(&Task::ClusterClassification(contaminated), 20, 71).unwrap().renamed("c"))
        .unwrap();
    let val = generate_dataset(&task, 25, 72).unwrap();
    let run = selection_run(&task, &train_set, &val, seed, &fit_cfg(2000, seed));
    let p = loss_of(&run, Strategy::Proponents);
    check(p < run.full, format!("proponents-50% val loss {p:.4} vs full {:.4} (20% shifted, label-rotated contamination)", run.full))
}

trait Renamed {
    fn renamed(self, prefix: &str) -> ToyDataset;
}

impl Renamed for ToyDataset {
    fn renamed(mut self, prefix: &str) -> ToyDataset {
        for ex in &mut self.examples {
            ex.example_id = format!("{prefix}{}", ex.example_id);
        }
        self
    }
}

// ---------------------------------------------------------------------------
// 6
// ---------------------------------------------------------------------------

fn scale_layer0(m: &GradientManifest, c: f32) -> GradientManifest {
    let ex = m
        .examples()
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.per_layer[0].iter_mut().for_each(|x| *x *= c);
            e
        })
        .collect();
    GradientManifest::new(m.split(), m.layers().to_vec(), ex, m.model_tag(), m.created_at()).unwrap()
}

fn layer_budget() -> Outcome {
    let task = Task::cluster();
    let train_set = generate_dataset(&task, 60, 80).unwrap();
    let val = generate_dataset(&task, 20, 81).unwrap();
    let fitted = train(&model(&task, 3, 8), &train_set, &fit_cfg(500, 8)).unwrap();
    let grads = per_example_gradients(&fitted, &train_set).unwrap();
    let vgrads = val_manifest(per_example_gradients(&fitted, &val).unwrap());
    let budget = estimate_memory(&grads, 3).unwrap();
    let mut notes = vec![];
    let mut ok = true;

    let plain = profile_layer_budget(&grads, &vgrads, &InfluenceConfig::default(), None, &[1, 2, 3], budget).unwrap();
    ok &= plain.entry(3).unwrap().rho == 1.0;
    notes.push(format!("rho(k=3) = {}", plain.entry(3).unwrap().rho));

    let (g, v) = (scale_layer0(&grads, 100.0), scale_layer0(&vgrads, 100.0));
    for cfg in [InfluenceConfig::new(Estimator::Identity), InfluenceConfig::fixed(Estimator::Datainf, LAMBDA)] {
        let r = profile_layer_budget(&g, &v, &cfg, None, &[1, 2, 3], budget).unwrap();
        let rho1 = r.entry(1).unwrap().rho;
        ok &= r.chosen_k == 1 && rho1 > 0.99 && r.entry(3).unwrap().rho == 1.0;
        ok &= r.entries.iter().chain(&plain.entries).all(|e| e.s == e.rho / e.k as f64);
        notes.push(format!("layer-0 x100 ({}): rho(k=1) = {rho1:.4}, chosen_k = {}", cfg.estimator, r.chosen_k));
    }
    check(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 7
// ---------------------------------------------------------------------------

fn coverage_correlations() -> Outcome {
    let mut details = vec![];
    let passing = (0..5u64)
        .filter(|&seed| {
            let base = ClusterTask { label_noise: 0.1, ..cluster(seed) };
            let task = Task::ClusterClassification(base.clone());
            let shifted = Task::ClusterClassification(ClusterTask { shift: 3.0, ..base });
            let train_set = generate_dataset(&task, 100, 90 + seed).unwrap();
            let test = generate_dataset(&task, 25, 91 + seed)
                .unwrap()
                .renamed("in-")
                .concat(&generate_dataset(&shifted, 25, 92 + seed).unwrap().renamed("out-"))
                .unwrap();
            let fitted = train(&model(&task, 3, seed), &train_set, &fit_cfg(2000, seed)).unwrap();
            let grads = per_example_gradients(&fitted, &train_set).unwrap();
            let tgrads = per_example_gradients(&fitted, &test).unwrap().with_split(Split::Test);
            let cfg = InfluenceConfig::default();
            let cache = build_cache_for(&grads, &cfg, None).unwrap();
            let losses: Vec<(String, f64)> = test.ids().into_iter().zip(example_losses(&fitted, &test).unwrap()).collect();
            let vocab = test.vocab_or_classes;
            let emb = Embeddings {
                train: train_set.examples.iter().map(|e| e.sample.embedding(vocab)).collect(),
                test: test.examples.iter().map(|e| (e.example_id.clone(), e.sample.embedding(vocab))).collect(),
            };
            let r = coverage_report(&cache, &tgrads, &losses, &cfg, None, Some(&emb)).unwrap();
            let inf = r.influence_loss_corr.unwrap_or(f64::NAN);
            let sim = r.similarity_loss_corr.unwrap_or(f64::NAN);
            details.push(format!("{inf:.3}/{sim:.3}"));
            inf > 0.0 && inf > sim
        })
        .count();
    check(passing >= 4, format!("influence/similarity rank-vs-loss corr per seed [{}]; {passing}/5 pass", details.join(", ")))
}

// ---------------------------------------------------------------------------
// 8
// ---------------------------------------------------------------------------

fn cache_amortization() -> Outcome {
    let task = Task::markov();
    let data = generate_dataset(&task, 40, 100).unwrap();
    let fitted = train(&model(&task, 3, 1), &data, &fit_cfg(200, 1)).unwrap();
    let grads = per_example_gradients(&fitted, &data).unwrap();
    let test = per_example_gradients(&fitted, &generate_dataset(&task, 30, 101).unwrap()).unwrap();
    let cache = build_cache(&grads).unwrap();
    let before = grads.example_reads();
    let cfg = InfluenceConfig::new(Estimator::Identity);
    for t in test.examples() {
        coverage_score(&cache, t, &cfg, Some(&grads)).map_err(|e| e.to_string())?;
    }
    let reads = grads.example_reads() - before;
    check(reads == 0, format!("{} test points scored, {reads} training-manifest reads", test.len()))
}

// ---------------------------------------------------------------------------
// 9
// ---------------------------------------------------------------------------

fn format_round_trip() -> Outcome {
    let dims = [24usize, 32, 22];
    let layers: Vec<LayerSpec> = dims.iter().enumerate().map(|(i, &d)| LayerSpec::new(i, format!("layer{i}.lora"), d)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let examples = (0..10_000)
        .map(|i| {
            let per_layer = dims.iter().map(|&d| (0..d).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()).collect();
            ExampleGradient::new(format!("ex-{i:05}"), per_layer, rng.random(), rng.random_range(1..50))
        })
        .collect();
    let m = GradientManifest::new(Split::Train, layers, examples, "round-trip", 42).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("grads.bin");
    let written = write_manifest(&m, &path).map_err(|e| e.to_string())?;
    let back = read_manifest(&path).map_err(|e| e.to_string())?;
    let bit_exact = back == m;
    let k1 = restrict_layers(&m, 1).unwrap();
    let total: usize = dims.iter().sum();
    let fraction_ok = k1.payload_bytes() * total as u64 == m.payload_bytes() * dims[0] as u64;
    check(
        bit_exact && fraction_ok,
        format!(
            "{written} bytes written, bit-exact read: {bit_exact}; k=1 payload {} of {} bytes ({}/{total})",
            k1.payload_bytes(),
            m.payload_bytes(),
            dims[0]
        ),
    )
}

// ---------------------------------------------------------------------------
// 10
// ---------------------------------------------------------------------------

/// Every CLI command, run in order inside one directory.
const PIPELINE: &[&[&str]] = &[
    &["toy", "generate", "--task", "cluster", "--n", "60", "--seed", "1", "--name", "train"],
    &["toy", "generate", "--task", "cluster", "--n", "20", "--seed", "2", "--name", "val"],
    &["toy", "generate", "--task", "cluster", "--n", "20", "--seed", "3", "--name", "test", "--shift", "1.5"],
    &["toy", "generate", "--task", "cluster", "--n", "12", "--seed", "4", "--name", "small"],
    &["toy", "generate", "--task", "markov", "--n", "10", "--seed", "5", "--name", "tokens"],
    &["toy", "train", "--data", "train.json", "--epochs", "200", "--line-search", "true", "--newton-steps", "5"],
    &["toy", "grads", "--model", "model.json", "--data", "train.json", "--split", "train"],
    &["toy", "grads", "--model", "model.json", "--data", "val.json", "--split", "validation", "--name", "val"],
    &["toy", "grads", "--model", "model.json", "--data", "test.json", "--split", "test"],
    &["toy", "hessian", "--model", "model.json", "--data", "train.json"],
    &["toy", "loo", "--data", "small.json", "--val-data", "val.json", "--init-model", "init_model.json", "--epochs", "100"],
    &["toy", "embed", "--data", "train.json"],
    &["toy", "embed", "--data", "test.json"],
    &["toy", "embed", "--data", "tokens.json"],
    &["influence", "--train", "train.bin", "--val", "val.bin"],
    &["influence", "--train", "train.bin", "--val", "val.bin", "--estimator", "exact", "--damping", "0.01", "--hessian", "hessian.json", "--out", "exact"],
    &["select", "--influence", "influence.csv", "--fraction", "0.5", "--compare", "--seed", "3"],
    &["select", "--train", "train.bin", "--val", "val.bin", "--strategy", "random", "--count", "17", "--seed", "9", "--out", "random"],
    &["layer-budget", "--train", "train.bin", "--val", "val.bin", "--ks", "1,2,3", "--subset", "40", "--subset-seed", "2"],
    &["coverage", "cache", "--train", "train.bin"],
    &["coverage", "score", "--cache", "cache.bin", "--test", "test.bin"],
    &["coverage", "report", "--cache", "cache.bin", "--test", "test.bin", "--train-embeddings", "train.embeddings.csv", "--test-embeddings", "test.embeddings.csv"],
    &["coverage", "cache", "--train", "train.bin", "--estimator", "exact", "--hessian", "hessian.json", "--damping", "0.01", "--name", "exact-cache"],
    &["coverage", "report", "--cache", "exact-cache.bin", "--test", "test.bin", "--out", "exact"],
];

/// All files under `dir`, relative path to contents.
fn snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut snapshots = vec![];
    for threads in ["1", "4"] {
        for rep in 0..2 {
            let dir = root.path().join(format!("threads{threads}-run{rep}"));
            std::fs::create_dir_all(&dir).unwrap();
            for args in PIPELINE {
                let out = cli(args, threads, &dir);
                if !out.status.success() {
                    return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
                }
            }
            snapshots.push((format!("IN2CORE_THREADS={threads} run {rep}"), snapshot(&dir)));
        }
    }
    let (ref_name, reference) = &snapshots[0];
    for (name, snap) in &snapshots[1..] {
        if snap.keys().ne(reference.keys()) {
            return Err(format!("{name} wrote a different file set than {ref_name}"));
        }
        if let Some((file, _)) = snap.iter().find(|(k, v)| reference[*k] != **v) {
            return Err(format!("{file} differs between {ref_name} and {name}"));
        }
    }
    let bytes: usize = reference.values().map(Vec::len).sum();
    Ok(format!(
        "{} commands x 4 runs (threads 1 and 4); {} files, {bytes} bytes, all byte-identical",
        PIPELINE.len(),
        reference.len()
    ))
}

fn cli(args: &[&str], threads: &str, dir: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_in2core")).args(args).current_dir(dir).env("IN2CORE_THREADS", threads).output().unwrap()
}

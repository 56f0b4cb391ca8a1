use serde::Serialize;

use in2core::gradient_store::{write_manifest, GradientManifest, Split};
use in2core::influence::Hessian;
use in2core::toy::{
    generate_dataset, loo_oracle, loss_hessian, per_example_gradients, train_with_trace, ModelConfig, Task, ToyDataset,
    ToyModel, TrainConfig,
};
use in2core::{Error, Result};

use super::output::{read_json, write_csv, write_embeddings, write_json, Provenance};
use super::{announce, Ctx, EmbedArgs, GenerateArgs, GradsArgs, HessianArgs, LooArgs, ToyCommand, TrainArgs, TrainFlags};

pub fn run(ctx: &Ctx, cmd: ToyCommand) -> Result<()> {
    match cmd {
        ToyCommand::Generate(a) => generate(ctx, &a),
        ToyCommand::Train(a) => train(ctx, &a),
        ToyCommand::Grads(a) => grads(ctx, &a),
        ToyCommand::Hessian(a) => hessian(ctx, &a),
        ToyCommand::Loo(a) => loo(ctx, &a),
        ToyCommand::Embed(a) => embed(ctx, &a),
    }
}

fn resolve_task(ctx: &Ctx, a: &GenerateArgs) -> Result<Task> {
    let t = &ctx.cfg.toy;
    let kind = a.task.as_deref().or(t.task.as_deref()).unwrap_or("cluster");
    let mut task = match kind {
        "cluster" | "cluster_classification" => Task::ClusterClassification(t.cluster.clone().unwrap_or_default()),
        "markov" | "markov_next_token" => Task::MarkovNextToken(t.markov.clone().unwrap_or_default()),
        other => return Err(Error::InvalidArgument(format!("unknown task `{other}` (expected cluster or markov)"))),
    };
    match &mut task {
        Task::ClusterClassification(c) => {
            if let Some(s) = a.world_seed {
                c.world_seed = s;
            }
            if let Some(s) = a.shift {
                c.shift = s;
            }
            if let Some(p) = a.label_noise {
                c.label_noise = p;
            }
            if let Some(r) = a.label_rotation {
                c.label_rotation = r;
            }
        }
        Task::MarkovNextToken(m) => {
            if a.shift.is_some() || a.label_noise.is_some() || a.label_rotation.is_some() {
                return Err(Error::InvalidArgument("--shift, --label-noise and --label-rotation only apply to cluster".into()));
            }
            if let Some(s) = a.world_seed {
                m.world_seed = s;
            }
        }
    }
    Ok(task)
}

fn generate(ctx: &Ctx, a: &GenerateArgs) -> Result<()> {
    let task = resolve_task(ctx, a)?;
    let n = a.n.or(ctx.cfg.toy.n).unwrap_or(100);
    let seed = a.seed.or(ctx.cfg.toy.seed).unwrap_or(0);
    let name = a.name.clone().or_else(|| ctx.cfg.toy.name.clone()).unwrap_or_else(|| "dataset".into());
    let data = generate_dataset(&task, n, seed)?;
    let path = ctx.path(&format!("{name}.json"));
    write_json(&path, &data)?;
    announce(&path, &format!("{n} examples, seed {seed}"));
    Ok(())
}

fn model_config(ctx: &Ctx, f: &TrainFlags) -> ModelConfig {
    let mut m = ctx.cfg.model.clone().unwrap_or_default();
    if let Some(v) = f.layers {
        m.layers = v;
    }
    if let Some(v) = f.rank {
        m.rank = v;
    }
    if let Some(v) = f.hidden {
        m.hidden = v;
    }
    if let Some(v) = f.seed {
        m.seed = v;
    }
    m
}

fn train_config(ctx: &Ctx, f: &TrainFlags) -> TrainConfig {
    let mut t = ctx.cfg.train.clone().unwrap_or_default();
    if let Some(v) = f.seed {
        t.seed = v;
    }
    if let Some(v) = f.lr {
        t.learning_rate = v;
    }
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.l2 {
        t.l2_damping = v;
    }
    if let Some(v) = f.line_search {
        t.line_search = v;
    }
    if let Some(v) = f.tolerance {
        t.tolerance = v;
    }
    if let Some(v) = f.newton_steps {
        t.newton_steps = v;
    }
    t
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model_tag: String,
    init_model_tag: String,
    initial_loss: f64,
    final_loss: f64,
    final_grad_norm: f64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let data: ToyDataset = read_json(&ctx.input(&a.data, &ctx.cfg.inputs.data, "data")?)?;
    data.validate()?;
    let mcfg = model_config(ctx, &a.train);
    let tcfg = train_config(ctx, &a.train);
    let init = ToyModel::init(&data.task, &mcfg)?;
    let (fitted, trace) = train_with_trace(&init, &data, &tcfg)?;
    let init_path = ctx.path("init_model.json");
    write_json(&init_path, &init)?;
    announce(&init_path, &format!("initial model {}", init.tag()));
    let path = ctx.path("model.json");
    write_json(&path, &fitted)?;
    announce(&path, &format!("model {}, final loss {:.6}", fitted.tag(), trace.final_loss));
    let summary = TrainSummary {
        model_tag: fitted.tag(),
        init_model_tag: init.tag(),
        initial_loss: trace.initial_loss,
        final_loss: trace.final_loss,
        final_grad_norm: trace.final_grad_norm,
        model: &mcfg,
        train: &tcfg,
    };
    let spath = ctx.path("train_summary.json");
    write_json(&spath, &summary)?;
    announce(&spath, "training summary");
    Ok(())
}

fn grads(ctx: &Ctx, a: &GradsArgs) -> Result<()> {
    let model: ToyModel = read_json(&ctx.input(&a.model, &ctx.cfg.inputs.model, "model")?)?;
    let data: ToyDataset = read_json(&ctx.input(&a.data, &ctx.cfg.inputs.data, "data")?)?;
    data.validate()?;
    let g = &ctx.cfg.grads;
    let split: Split = a.split.as_deref().or(g.split.as_deref()).unwrap_or("train").parse()?;
    let name = a.name.clone().or_else(|| g.name.clone()).unwrap_or_else(|| split.to_string());
    let created_at = a.created_at.or(g.created_at).unwrap_or(0);
    let m = per_example_gradients(&model, &data)?;
    let m = GradientManifest::new(split, m.layers().to_vec(), m.examples().to_vec(), m.model_tag(), created_at)?;
    let path = ctx.path(&format!("{name}.bin"));
    let bytes = write_manifest(&m, &path)?;
    announce(&path, &format!("{} {split} gradients over {} layers, {bytes} bytes", m.len(), m.layer_count()));
    Ok(())
}

fn hessian(ctx: &Ctx, a: &HessianArgs) -> Result<()> {
    let model: ToyModel = read_json(&ctx.input(&a.model, &ctx.cfg.inputs.model, "model")?)?;
    let data: ToyDataset = read_json(&ctx.input(&a.data, &ctx.cfg.inputs.data, "data")?)?;
    data.validate()?;
    let step = a.step.or(ctx.cfg.toy.hessian_step).unwrap_or(1e-5);
    let dim = model.param_count();
    let h = Hessian::new(dim, loss_hessian(&model, &data, step)?)?;
    let path = ctx.path("hessian.json");
    write_json(&path, &h)?;
    announce(&path, &format!("{dim}x{dim} Hessian, step {step:e}"));
    Ok(())
}

fn loo(ctx: &Ctx, a: &LooArgs) -> Result<()> {
    let i = &ctx.cfg.inputs;
    let data: ToyDataset = read_json(&ctx.input(&a.data, &i.data, "data")?)?;
    let val: ToyDataset = read_json(&ctx.input(&a.val_data, &i.val_data, "val-data")?)?;
    let init: ToyModel = read_json(&ctx.input(&a.init_model, &i.init_model, "init-model")?)?;
    data.validate()?;
    val.validate()?;
    let tcfg = train_config(ctx, &a.train);
    let deltas = loo_oracle(&data, &val, &tcfg, &init)?;
    let provenance: Provenance = vec![
        ("command", "toy loo".into()),
        ("init_model_tag", init.tag()),
        ("n_train", data.len().to_string()),
        ("n_val", val.len().to_string()),
        ("learning_rate", tcfg.learning_rate.to_string()),
        ("epochs", tcfg.epochs.to_string()),
        ("l2_damping", tcfg.l2_damping.to_string()),
        ("seed", tcfg.seed.to_string()),
        ("delta", "val loss without the example minus val loss with it".into()),
    ];
    let path = ctx.path("loo.csv");
    write_csv(&path, &provenance, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["example_id", "delta"])?;
        for (id, d) in &deltas {
            w.write_record([id.clone(), d.to_string()])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    })?;
    announce(&path, &format!("{} leave-one-out deltas", deltas.len()));
    Ok(())
}

fn embed(ctx: &Ctx, a: &EmbedArgs) -> Result<()> {
    let src = ctx.input(&a.data, &ctx.cfg.inputs.data, "data")?;
    let data: ToyDataset = read_json(&src)?;
    data.validate()?;
    let stem = src.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let name = a.name.clone().unwrap_or(stem);
    let rows: Vec<(String, Vec<f64>)> =
        data.examples.iter().map(|e| (e.example_id.clone(), e.sample.embedding(data.vocab_or_classes))).collect();
    let path = ctx.path(&format!("{name}.embeddings.csv"));
    let provenance: Provenance = vec![("command", "toy embed".into()), ("n", rows.len().to_string())];
    write_embeddings(&path, &provenance, &rows)?;
    announce(&path, &format!("{} embeddings", rows.len()));
    Ok(())
}

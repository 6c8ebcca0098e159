use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use linknet::eval::{
    alignment_source, attention_alignment, evaluate, export_heatmap, fold_symmetric, run_ablation,
    AblationGrid, Task,
};
use linknet::gradcheck::{compare_gradients, numerical_gradient};
use linknet::model::{check_scene, forward, loss_and_gradients, model_loss_fn, ModelConfig};
use linknet::scenegen::{dataset::scene_to_line, read_dataset, GenConfig, Generator, Scene};
use linknet::train::checkpoint::write_atomic;
use linknet::train::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use linknet::Tensor;

use crate::exit::{CliResult, Context, Failure, DIVERGED, GRADCHECK};
use crate::manifest::{manifest_path, sibling, Recorder};
use crate::{AblateArgs, EvalArgs, GenDataArgs, GradcheckArgs, InspectArgs, TrainArgs};

/// Defaults when `path` is absent. An unreadable file is an I/O error, a
/// malformed or invalid one a config error.
fn load_config<T: DeserializeOwned>(path: Option<&Path>) -> CliResult<T> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::io(p, e))?,
        None => "{}".to_string(),
    };
    serde_json::from_str(&text).map_err(|e| {
        let at = path.map_or("<defaults>".to_string(), |p| p.display().to_string());
        Failure::config(format!("{at}: {e}"))
    })
}

fn read_scenes(path: &Path) -> CliResult<Vec<Scene>> {
    read_dataset(path).at(path)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_atomic(path, text.as_bytes()).at(path)
}

fn to_value(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

pub fn gen_data(args: &GenDataArgs) -> CliResult {
    let rec = Recorder::start("gen-data", args);
    let cfg: GenConfig = load_config(args.config.as_deref())?;
    let generator = Generator::new(cfg.clone())?;
    let mut text = String::new();
    for scene in generator.dataset(args.scenes, args.seed) {
        text.push_str(&scene_to_line(&scene)?);
        text.push('\n');
    }
    write_atomic(&args.out, text.as_bytes()).at(&args.out)?;
    eprintln!("wrote {} scenes to {}", args.scenes, args.out.display());
    rec.finish(
        json!({ "generator": to_value(&cfg) }),
        vec![args.seed],
        args.config.iter().cloned().collect(),
        vec![args.out.clone()],
        &manifest_path(&args.out),
    )
}

pub fn train(args: &TrainArgs) -> CliResult {
    let rec = Recorder::start("train", args);
    let data = read_scenes(&args.data)?;
    let train_cfg: TrainConfig = load_config(args.train_config.as_deref())?;
    train_cfg.validate()?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).at(path)?;
            if let Some(p) = &args.model_config {
                let cfg: ModelConfig = load_config(Some(p))?;
                if cfg != ckpt.params.config {
                    return Err(Failure::new(
                        crate::exit::MISMATCH,
                        format!("{}: model config differs from the checkpoint's", p.display()),
                    ));
                }
            }
            Trainer::from_checkpoint(ckpt, train_cfg.clone())?
        }
        None => {
            let cfg: ModelConfig = load_config(args.model_config.as_deref())?;
            Trainer::new(&cfg, train_cfg.clone())?
        }
    };
    let model_cfg = trainer.params.config.clone();
    for scene in &data {
        check_scene(scene, &model_cfg).at(&args.data)?;
    }

    let mut csv = String::from("epoch,obj,rel,gce,total\n");
    while trainer.epoch < train_cfg.epochs {
        let m = trainer.run_epoch(&data).map_err(|e| match e {
            linknet::Error::Diverged(why) => Failure::new(DIVERGED, format!("training diverged at {why}")),
            other => other.into(),
        })?;
        let _ = writeln!(csv, "{},{},{},{},{}", m.epoch, m.obj, m.rel, m.gce, m.total);
        eprintln!(
            "epoch {:>3}  total {:.4}  obj {:.4}  rel {:.4}  gce {:.4}",
            m.epoch, m.total, m.obj, m.rel, m.gce
        );
    }

    save_checkpoint(&trainer.checkpoint(), &args.out).at(&args.out)?;
    let losses = sibling(&args.out, "losses.csv");
    write_atomic(&losses, csv.as_bytes()).at(&losses)?;
    let mut inputs = vec![args.data.clone()];
    inputs.extend(args.model_config.iter().cloned());
    inputs.extend(args.train_config.iter().cloned());
    inputs.extend(args.resume.iter().cloned());
    rec.finish(
        json!({ "model": to_value(&model_cfg), "train": to_value(&train_cfg) }),
        vec![train_cfg.seed],
        inputs,
        vec![args.out.clone(), losses],
        &manifest_path(&args.out),
    )
}

pub fn eval(args: &EvalArgs) -> CliResult {
    let rec = Recorder::start("eval", args);
    let task: Task = args.task.parse()?;
    let data = read_scenes(&args.data)?;
    let ckpt = load_checkpoint(&args.ckpt).at(&args.ckpt)?;
    let report = evaluate(&ckpt.params, &data, task, &args.k)?;
    write_json(&args.report, &report)?;
    println!("{}", report.summary_line());
    rec.finish(
        json!({ "model": to_value(&ckpt.params.config), "task": task, "k": report.recall.iter().map(|r| r.k).collect::<Vec<_>>() }),
        vec![],
        vec![args.data.clone(), args.ckpt.clone()],
        vec![args.report.clone()],
        &manifest_path(&args.report),
    )
}

fn adjacency_tensor(scene: &Scene) -> Tensor {
    let rows: Vec<Vec<f64>> = scene
        .adjacency()
        .iter()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect();
    Tensor::from_rows(&rows)
}

pub fn inspect(args: &InspectArgs) -> CliResult {
    let rec = Recorder::start("inspect", args);
    let data = read_scenes(&args.data)?;
    let ckpt = load_checkpoint(&args.ckpt).at(&args.ckpt)?;
    let scene = data
        .iter()
        .find(|s| s.scene_id == args.scene_id)
        .ok_or_else(|| Failure::config(format!("no scene `{}` in {}", args.scene_id, args.data.display())))?;
    let out = forward(scene, &ckpt.params)?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::io(&args.out, e))?;

    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut export = |m: &Tensor, name: &str| -> CliResult {
        let stem = args.out.join(name);
        let (csv, pgm) = export_heatmap(m, &stem).at(&stem)?;
        outputs.push(csv);
        outputs.push(pgm);
        Ok(())
    };
    for (k, r) in out.object_attention.iter().enumerate() {
        export(r, &format!("obj_rem{k}"))?;
    }
    for (k, r) in out.edge_attention.iter().enumerate() {
        export(r, &format!("edge_rem{k}"))?;
    }
    let adjacency = adjacency_tensor(scene);
    export(&adjacency, "gt_adjacency")?;

    let source = alignment_source(&out);
    let source_name = source.map(|_| format!("obj_rem{}", out.object_attention.len() - 1));
    let alignment = match source {
        Some(r) => attention_alignment(r, &scene.adjacency())?,
        None => None,
    };
    if let Some(r) = source {
        let folded = fold_symmetric(r)?;
        let mut csv = String::from("i,j,related,weight\n");
        for i in 0..scene.len() {
            for j in i + 1..scene.len() {
                let _ = writeln!(csv, "{i},{j},{},{}", adjacency.get(i, j), folded.get(i, j));
            }
        }
        let path = args.out.join("folded.csv");
        write_atomic(&path, csv.as_bytes()).at(&path)?;
        outputs.push(path);
    }
    let path = args.out.join("alignment.json");
    write_json(
        &path,
        &json!({ "scene_id": scene.scene_id, "source": source_name, "attention_alignment": alignment }),
    )?;
    outputs.push(path);
    match alignment {
        Some(a) => println!("{} attention_alignment={a}", scene.scene_id),
        None => println!("{} attention_alignment=n/a", scene.scene_id),
    }
    rec.finish(
        json!({ "model": to_value(&ckpt.params.config) }),
        vec![],
        vec![args.ckpt.clone(), args.data.clone()],
        outputs,
        &args.out.join("manifest.json"),
    )
}

/// A scene sized to `cfg` with exactly `objects` objects.
fn gradcheck_scene(cfg: &ModelConfig, objects: usize, seed: u64) -> CliResult<Scene> {
    let gen = GenConfig {
        num_obj_classes: cfg.num_obj_classes,
        num_rel_classes: cfg.num_rel_classes,
        roi_dim: cfg.roi_dim,
        image_dim: cfg.image_dim,
        min_objects: objects,
        max_objects: objects,
        ..GenConfig::default()
    };
    Ok(Generator::new(gen)?.scene(seed))
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult {
    let cfg: ModelConfig = load_config(args.model_config.as_deref())?;
    let params = linknet::train::init_params(&cfg, args.seed)?;
    let scene = gradcheck_scene(&cfg, args.objects, args.seed)?;

    let (_, grads) = loss_and_gradients(&scene, &params)?;
    let names: Vec<String> = params.names().cloned().collect();
    let mut analytic: Vec<Tensor> = names.iter().map(|n| grads[n].clone()).collect();
    if args.sabotage {
        for v in analytic[0].data_mut() {
            *v += 1e-2;
        }
    }
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let f = model_loss_fn(&scene, &cfg, &names);
    let numeric = numerical_gradient(&f, &values, args.eps)?;
    let report = compare_gradients(&analytic, &numeric);
    let worst = &names[report.worst_param];
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {worst}[{}])",
        report.max_rel_error, report.coordinates, report.worst_index
    );
    if report.max_rel_error < args.tolerance {
        Ok(())
    } else {
        Err(Failure::new(
            GRADCHECK,
            format!(
                "gradient check failed: {:.3e} >= {:.1e} at parameter `{worst}`",
                report.max_rel_error, args.tolerance
            ),
        ))
    }
}

pub fn ablate(args: &AblateArgs) -> CliResult {
    let rec = Recorder::start("ablate", args);
    let train_data = read_scenes(&args.data)?;
    let eval_data = match &args.eval_data {
        Some(p) => read_scenes(p)?,
        None => train_data.clone(),
    };
    let base: ModelConfig = load_config(args.model_config.as_deref())?;
    base.validate()?;
    let train_cfg: TrainConfig = load_config(args.train_config.as_deref())?;
    let grid = match &args.grid {
        Some(p) => load_config::<AblationGrid>(Some(p))?,
        None => AblationGrid::default_grid(&base),
    };
    let seeds: Vec<u64> = (0..args.seeds).map(|k| train_cfg.seed + k).collect();
    let table = run_ablation(&grid, &base, &train_cfg, &train_data, &eval_data, &seeds)?;

    write_atomic(&args.out, table.to_csv().as_bytes()).at(&args.out)?;
    let summary = table.summary();
    let summary_path = sibling(&args.out, "summary.json");
    write_json(&summary_path, &summary)?;
    for s in &summary {
        let cols: Vec<String> = s
            .recall
            .iter()
            .map(|(k, m, sd)| format!("R@{k} {m:.4}±{sd:.4}"))
            .collect();
        println!("{:<28} ok {}/{}  {}", s.cell, s.n_ok, seeds.len(), cols.join("  "));
    }

    let mut inputs = vec![args.data.clone()];
    inputs.extend(args.eval_data.iter().cloned());
    inputs.extend(args.grid.iter().cloned());
    inputs.extend(args.model_config.iter().cloned());
    inputs.extend(args.train_config.iter().cloned());
    rec.finish(
        json!({ "model": to_value(&base), "train": to_value(&train_cfg), "grid": to_value(&grid) }),
        seeds,
        inputs,
        vec![args.out.clone(), summary_path],
        &manifest_path(&args.out),
    )?;
    if table.all_failed() {
        return Err(Failure::new(DIVERGED, "every ablation run failed"));
    }
    Ok(())
}

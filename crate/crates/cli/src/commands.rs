//! The five subcommands. Each one writes its outputs and a manifest into
//! `output_dir` and returns a JSON summary for stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use latent_ct::io::{
    export_pgm, read_image, read_metrics_csv, read_sinogram, save_checkpoint, write_curve_csv, write_image,
    write_metrics_csv, write_sinogram, MetricRow, DISPLAY_WINDOW_HU,
};
use latent_ct::metrics::{summarize, MetricReport, Stats};
use latent_ct::phantom::{generate_phantom, PhantomKind};
use latent_ct::geometry::project;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::experiments::{load_priors, run_method, train_from_config, MethodSettings, Method, Prior, Problem, Sweep};
use crate::manifest::{sha256_file, unix_now, RunManifest, CODE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Simulate,
    Train,
    Reconstruct { method: Method },
    Evaluate,
    Sweep { sweep: Sweep },
}

impl Command {
    /// File-name stem for this command's manifest.
    pub fn stem(&self) -> String {
        match self {
            Command::Simulate => "simulate".into(),
            Command::Train => "train".into(),
            Command::Reconstruct { method } => format!("reconstruct_{}", method.name()),
            Command::Evaluate => "evaluate".into(),
            Command::Sweep { sweep } => format!("sweep_{}", sweep.name()),
        }
    }
}

pub struct Outcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    pub summary: Value,
}

/// Files written by a command and files it read.
#[derive(Default)]
struct Record {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
}

pub fn execute(command: &Command, cfg: &RunConfig) -> Result<Outcome> {
    let started = unix_now();
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    let mut rec = Record::default();
    let summary = match command {
        Command::Simulate => simulate(cfg, &mut rec)?,
        Command::Train => train(cfg, &mut rec)?,
        Command::Reconstruct { method } => reconstruct(*method, cfg, &mut rec)?,
        Command::Evaluate => evaluate(cfg, &mut rec)?,
        Command::Sweep { sweep } => sweep_cmd(*sweep, cfg, &mut rec)?,
    };
    let digest_all = |paths: &[PathBuf], relative: bool| -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| {
                let key = if relative {
                    p.strip_prefix(dir).unwrap_or(p).display().to_string()
                } else {
                    p.display().to_string()
                };
                Ok((key, sha256_file(p)?))
            })
            .collect()
    };
    let manifest = RunManifest {
        command: *command,
        config: cfg.clone(),
        seeds: rec.seeds,
        geometry: cfg.geometry,
        code_version: CODE_VERSION.to_string(),
        started_unix_s: started,
        finished_unix_s: unix_now(),
        inputs: digest_all(&rec.inputs, false)?,
        outputs: digest_all(&rec.outputs, true)?,
    };
    let manifest_path = manifest.write(dir)?;
    Ok(Outcome { manifest, manifest_path, summary })
}

fn simulate(cfg: &RunConfig, rec: &mut Record) -> Result<Value> {
    let dir = &cfg.output_dir;
    ensure!(!cfg.simulate.strides.is_empty(), "simulate.strides is empty");
    ensure!(
        cfg.phantom.size_px == cfg.geometry.image_size_px,
        "phantom is {0}x{0} but the geometry reconstructs {1}x{1}",
        cfg.phantom.size_px,
        cfg.geometry.image_size_px
    );
    if let PhantomKind::RandomEllipses { seed, .. } = cfg.phantom.kind {
        rec.seeds.insert("phantom".into(), seed);
    }
    let truth = generate_phantom(&cfg.phantom)?;
    let truth_path = dir.join("phantom.f32");
    write_image(&truth_path, &truth, Some(&cfg.geometry))?;
    rec.outputs.push(truth_path);
    rec.outputs.push(export_pgm(dir, "phantom", &truth, DISPLAY_WINDOW_HU)?);

    let mut files = Vec::new();
    for &stride in &cfg.simulate.strides {
        let geom = cfg.geometry.with_stride(stride);
        geom.validate()?;
        let sino = project(&geom, &truth)?;
        let path = dir.join(format!("sinogram_stride{stride}.f32"));
        write_sinogram(&path, &sino, Some(&geom))?;
        files.push(json!({ "stride": stride, "views": sino.n_views(), "path": path }));
        rec.outputs.push(path);
    }
    Ok(json!({ "phantom": dir.join("phantom.f32"), "sinograms": files }))
}

fn train(cfg: &RunConfig, rec: &mut Record) -> Result<Value> {
    let dir = &cfg.output_dir;
    rec.seeds.insert("train".into(), cfg.train.rng_seed);
    rec.seeds.insert("dataset_first".into(), cfg.dataset.first_seed);
    let t_max = cfg.model.schedule.t_max();
    let steps_per_epoch = cfg.dataset.n_images.div_ceil(cfg.train.batch_size.max(1));
    let mut epoch_loss = 0.0;
    let out = train_from_config(cfg, |step, loss| {
        epoch_loss += loss;
        if (step + 1) % steps_per_epoch == 0 {
            eprintln!("epoch {} loss {:.5}", (step + 1) / steps_per_epoch, epoch_loss / steps_per_epoch as f64);
            epoch_loss = 0.0;
        }
    })?;
    let ckpt = dir.join(format!("model_T{t_max}.ckpt"));
    save_checkpoint(&ckpt, &out.model, &cfg.model.schedule, cfg.train.rng_seed)?;
    let losses = dir.join("train_loss.csv");
    write_curve_csv(&losses, "step", "loss", &out.losses)?;
    rec.outputs.extend([ckpt.clone(), losses]);
    let tail = &out.losses[out.losses.len().saturating_sub(50)..];
    Ok(json!({
        "checkpoint": ckpt,
        "steps": out.losses.len(),
        "final_smoothed_loss": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
    }))
}

fn required(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone().with_context(|| format!("inputs.{key} is required for this command"))
}

fn reconstruct(method: Method, cfg: &RunConfig, rec: &mut Record) -> Result<Value> {
    let dir = &cfg.output_dir;
    let sino_path = required(&cfg.inputs.sinogram, "sinogram")?;
    let prior = if method.needs_model() {
        let path = cfg
            .inputs
            .checkpoint
            .clone()
            .with_context(|| format!("method {} needs inputs.checkpoint", method.name()))?;
        ensure!(path.is_file(), "checkpoint {} does not exist", path.display());
        rec.inputs.push(path.clone());
        rec.seeds.insert("latent_noise".into(), cfg.latent.noise_seed);
        rec.seeds.insert("latent_init".into(), cfg.latent.init_seed);
        Some(Prior::load(&path)?)
    } else {
        None
    };
    let (sinogram, header) = read_sinogram(&sino_path)?;
    rec.inputs.push(sino_path);
    let geometry = header.geometry.unwrap_or(cfg.geometry);
    let truth = match &cfg.inputs.ground_truth {
        Some(p) => {
            rec.inputs.push(p.clone());
            Some(read_image(p)?.0)
        }
        None => None,
    };
    let problem = Problem { id: "input".into(), geometry, sinogram, truth };
    let run = run_method(method, &problem, &MethodSettings::from_config(cfg), prior.as_ref())?;

    let stem = format!("recon_{}", method.name());
    let image_path = dir.join(format!("{stem}.f32"));
    write_image(&image_path, &run.image, Some(&geometry))?;
    rec.outputs.push(image_path.clone());
    rec.outputs.push(export_pgm(dir, &stem, &run.image, DISPLAY_WINDOW_HU)?);
    if !run.loss_history.is_empty() {
        let path = dir.join(format!("loss_{}.csv", method.name()));
        write_curve_csv(&path, "iteration", "fidelity_loss", &run.loss_history)?;
        rec.outputs.push(path);
    }
    if let Some(m) = run.metrics {
        let path = dir.join(format!("metrics_{}.json", method.name()));
        std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
        rec.outputs.push(path);
    }
    Ok(json!({
        "method": method.name(),
        "image": image_path,
        "final_loss": run.final_loss,
        "metrics": run.metrics,
    }))
}

fn evaluate(cfg: &RunConfig, rec: &mut Record) -> Result<Value> {
    let dir = &cfg.output_dir;
    if let Some(csv) = &cfg.inputs.metrics_csv {
        rec.inputs.push(csv.clone());
        let rows = read_metrics_csv(csv)?;
        let summary = summarize_rows(&rows)?;
        let path = dir.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
        rec.outputs.push(path);
        return Ok(summary);
    }
    let truth_path = required(&cfg.inputs.ground_truth, "ground_truth")?;
    let test_path = required(&cfg.inputs.test_image, "test_image")?;
    let (truth, _) = read_image(&truth_path)?;
    let (test, _) = read_image(&test_path)?;
    rec.inputs.extend([truth_path, test_path]);
    let report = MetricReport::evaluate(&truth, &test)?;
    let path = dir.join("evaluation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    rec.outputs.push(path);
    Ok(serde_json::to_value(report)?)
}

/// Order statistics of SSIM, PSNR and every extra column, grouped by
/// `(method, T)`.
pub fn summarize_rows(rows: &[MetricRow]) -> Result<Value> {
    ensure!(!rows.is_empty(), "metric table is empty");
    let mut groups: BTreeMap<String, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        let key = match r.t {
            Some(t) => format!("{} T={t}", r.method),
            None => r.method.clone(),
        };
        groups.entry(key).or_default().push(r);
    }
    let mut out = serde_json::Map::new();
    for (key, members) in groups {
        let reports: Vec<MetricReport> =
            members.iter().map(|r| MetricReport { ssim: r.ssim, psnr_db: r.psnr_db }).collect();
        let mut entry = serde_json::to_value(summarize(&reports)?)?;
        let mut extras: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &members {
            for (name, v) in &r.extra {
                extras.entry(name.as_str()).or_default().push(*v);
            }
        }
        for (name, values) in extras {
            entry[name] = serde_json::to_value(Stats::of(&values)?)?;
        }
        entry["count"] = json!(members.len());
        out.insert(key, entry);
    }
    Ok(Value::Object(out))
}

fn sweep_cmd(sweep: Sweep, cfg: &RunConfig, rec: &mut Record) -> Result<Value> {
    let depths = sweep.required_depths(cfg);
    let priors = load_priors(cfg, &depths)?;
    for t in &depths {
        rec.inputs.push(cfg.sweep.checkpoints[t].clone());
    }
    rec.seeds.insert("latent_noise".into(), cfg.latent.noise_seed);
    rec.seeds.insert("latent_init".into(), cfg.latent.init_seed);
    rec.seeds.insert("suite_first".into(), cfg.sweep.first_seed);
    let rows = crate::experiments::run_sweep(sweep, cfg, &priors)?;
    let path = cfg.output_dir.join(format!("sweep_{}.csv", sweep.name()));
    write_metrics_csv(&path, &rows)?;
    rec.outputs.push(path.clone());
    let summary = summarize_rows(&rows)?;
    Ok(json!({ "table": path, "rows": rows.len(), "summary": summary }))
}

/// Re-runs the command recorded in `manifest_path` (optionally into a new
/// output directory) and reports which output digests changed.
pub fn replay(manifest_path: &Path, output_dir: Option<PathBuf>) -> Result<(Outcome, Vec<String>)> {
    let recorded = RunManifest::read(manifest_path)?;
    let mut cfg = recorded.config.clone();
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let outcome = execute(&recorded.command, &cfg)?;
    let mismatches = recorded.digest_mismatches(&outcome.manifest);
    Ok((outcome, mismatches))
}

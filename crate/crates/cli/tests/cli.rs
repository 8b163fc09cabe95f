use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_ct::io::{read_curve_csv, read_image, read_metrics_csv, read_sinogram};
use latent_ct::metrics::psnr;
use latent_ct_cli::manifest::RunManifest;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-ct"))
}

/// A 16×16 setup that keeps every command under a second or two.
fn small_config(dir: &Path) -> Value {
    json!({
        "output_dir": dir,
        "geometry": {
            "source_to_center_mm": 40.0,
            "source_to_detector_mm": 70.0,
            "n_detectors": 20,
            "detector_spacing_mm": 2.4,
            "n_views": 40,
            "image_size_px": 16,
            "pixel_spacing_mm": 1.5,
            "view_subsample_stride": 1
        },
        "phantom": { "kind": { "kind": "shepp_logan" }, "size_px": 16 },
        "simulate": { "strides": [1, 4] },
        "dataset": { "n_images": 24, "n_ellipses": 4, "first_seed": 0 },
        "train": { "learning_rate": 2e-3, "batch_size": 4, "n_epochs": 3, "rng_seed": 1 },
        "latent": { "n_iterations": 5 },
        "sweep": { "stride": 4, "n_slices": 5, "noise_seeds": [1, 2], "noise_t": 2,
                   "sparsity": [{ "stride": 4, "n_iterations": 3 }, { "stride": 8, "n_iterations": 6 }] }
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Value {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.lines().last().unwrap()).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn train_small(dir: &Path, t: usize) -> PathBuf {
    let cfg_path = write_config(dir, &small_config(dir));
    run_ok(bin().args(["train", "--config"]).arg(&cfg_path).args(["--set", &format!("model.schedule={{\"kind\":\"cosine\",\"t_max\":{t},\"s\":0.008}}")]));
    dir.join(format!("model_T{t}.ckpt"))
}

#[test]
fn simulate_writes_strided_sinograms_and_replays_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim");
    let cfg = write_config(&dir, &small_config(&dir));
    let summary = run_ok(bin().arg("simulate").arg("--config").arg(&cfg));
    assert_eq!(summary["summary"]["sinograms"].as_array().unwrap().len(), 2);
    let (full, header) = read_sinogram(&dir.join("sinogram_stride1.f32")).unwrap();
    let (sparse, _) = read_sinogram(&dir.join("sinogram_stride4.f32")).unwrap();
    assert_eq!((full.n_views(), sparse.n_views()), (40, 10));
    assert_eq!(header.geometry.unwrap().n_views, 40);
    assert!(dir.join("phantom_w-150_200.pgm").is_file());

    let manifest_path = dir.join("simulate.manifest.json");
    let first = RunManifest::read(&manifest_path).unwrap();
    assert_eq!(first.outputs.len(), 4);
    let replay_dir = tmp.path().join("replay");
    let replay = run_ok(bin().arg("--from-manifest").arg(&manifest_path).arg("--output-dir").arg(&replay_dir));
    assert_eq!(replay["identical_outputs"], 4);
    let second = RunManifest::read(&replay_dir.join("simulate.manifest.json")).unwrap();
    assert_eq!(first.outputs, second.outputs);
}

#[test]
fn clinical_strides_give_the_expected_view_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let mut cfg = small_config(&dir);
    // clinical acquisition, coarse image grid over the same field of view
    cfg["geometry"] = json!({
        "source_to_center_mm": 1150.0, "source_to_detector_mm": 1772.0,
        "n_detectors": 528, "detector_spacing_mm": 1.0, "n_views": 800,
        "image_size_px": 16, "pixel_spacing_mm": 31.25, "view_subsample_stride": 1
    });
    cfg["simulate"]["strides"] = json!([1, 10, 20]);
    let path = write_config(&dir, &cfg);
    run_ok(bin().arg("simulate").arg("--config").arg(&path));
    let views: Vec<usize> = [1, 10, 20]
        .iter()
        .map(|s| read_sinogram(&dir.join(format!("sinogram_stride{s}.f32"))).unwrap().0.n_views())
        .collect();
    assert_eq!(views, vec![800, 80, 40]);
}

#[test]
fn zero_phantom_gives_zero_sinograms() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let mut cfg = small_config(&dir);
    cfg["phantom"]["intensity_range"] = json!([0.0, 0.0]);
    let path = write_config(&dir, &cfg);
    run_ok(bin().arg("simulate").arg("--config").arg(&path));
    for s in [1, 4] {
        let (sino, _) = read_sinogram(&dir.join(format!("sinogram_stride{s}.f32"))).unwrap();
        assert!(sino.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn training_is_reproducible_and_logs_every_step() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_small(&tmp.path().join("a"), 3);
    let b = train_small(&tmp.path().join("b"), 3);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let losses = read_curve_csv(&tmp.path().join("a/train_loss.csv")).unwrap();
    // 24 images in batches of 4 for 3 epochs
    assert_eq!(losses.len(), 18);
    let manifest = RunManifest::read(&tmp.path().join("a/train.manifest.json")).unwrap();
    assert_eq!(manifest.seeds["train"], 1);
    assert_eq!(
        manifest.outputs["model_T3.ckpt"],
        RunManifest::read(&tmp.path().join("b/train.manifest.json")).unwrap().outputs["model_T3.ckpt"]
    );
}

#[test]
fn smoothed_training_loss_decreases() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let mut cfg = small_config(&dir);
    cfg["dataset"]["n_images"] = json!(100);
    cfg["train"]["n_epochs"] = json!(6);
    cfg["model"] = json!({ "schedule": { "kind": "cosine", "t_max": 10, "s": 0.008 } });
    let path = write_config(&dir, &cfg);
    let summary = run_ok(bin().arg("train").arg("--config").arg(&path));
    assert_eq!(summary["summary"]["steps"], 150);
    let losses = read_curve_csv(&dir.join("train_loss.csv")).unwrap();
    let first: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn full_view_ir_is_accurate_on_the_desk_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    run_ok(bin().arg("simulate").arg("--output-dir").arg(&dir).args(["--set", "simulate.strides=[1]"]));
    let out = run_ok(
        bin()
            .args(["reconstruct", "--method", "ir", "--output-dir"])
            .arg(&dir)
            .arg("--sinogram")
            .arg(dir.join("sinogram_stride1.f32"))
            .arg("--ground-truth")
            .arg(dir.join("phantom.f32")),
    );
    let db = out["summary"]["metrics"]["psnr_db"].as_f64().unwrap();
    assert!(db >= 40.0, "{db} dB");
    assert_eq!(read_curve_csv(&dir.join("loss_ir.csv")).unwrap().len(), 201);
}

fn reconstruct(dir: &Path, cfg: &Path, method: &str, extra: &[&str]) -> Value {
    run_ok(
        bin()
            .args(["reconstruct", "--method", method, "--config"])
            .arg(cfg)
            .arg("--output-dir")
            .arg(dir)
            .arg("--sinogram")
            .arg(dir.join("sinogram_stride4.f32"))
            .arg("--ground-truth")
            .arg(dir.join("phantom.f32"))
            .args(extra),
    )
}

#[test]
fn method_reductions_hold_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let ckpt = train_small(&dir, 2);
    let cfg = write_config(&dir, &small_config(&dir));
    run_ok(bin().arg("simulate").arg("--config").arg(&cfg));
    let ck = format!("inputs.checkpoint={}", json!(ckpt.display().to_string()));
    let latent_t = ["--set", "latent.t=2", "--set", ck.as_str()];

    reconstruct(&dir, &cfg, "sddpm_only", &latent_t);
    let mut frozen: Vec<&str> = latent_t.to_vec();
    frozen.extend(["--set", "latent.gamma=0"]);
    reconstruct(&dir, &cfg, "latent", &frozen);
    let (a, _) = read_image(&dir.join("recon_sddpm_only.f32")).unwrap();
    let (b, _) = read_image(&dir.join("recon_latent.f32")).unwrap();
    assert_eq!(a, b);

    reconstruct(&dir, &cfg, "ir", &[]);
    reconstruct(&dir, &cfg, "ir_tv", &["--set", "tv.lambda=0"]);
    let (ir, _) = read_image(&dir.join("recon_ir.f32")).unwrap();
    let (tv, _) = read_image(&dir.join("recon_ir_tv.f32")).unwrap();
    assert!(ir.max_abs_diff(&tv) <= 1e-8);

    let out = reconstruct(&dir, &cfg, "latent", &latent_t);
    assert_eq!(read_curve_csv(&dir.join("loss_latent.csv")).unwrap().len(), 5);
    let manifest = RunManifest::read(&dir.join("reconstruct_latent.manifest.json")).unwrap();
    assert_eq!(manifest.seeds["latent_noise"], 11);
    let (truth, _) = read_image(&dir.join("phantom.f32")).unwrap();
    let (recon, _) = read_image(&dir.join("recon_latent.f32")).unwrap();
    let reported = out["summary"]["metrics"]["psnr_db"].as_f64().unwrap();
    // the file is stored as f32
    assert!((psnr(&truth, &recon, 2.0).unwrap() - reported).abs() < 1e-3);
}

#[test]
fn diffusion_methods_require_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let cfg = write_config(&dir, &small_config(&dir));
    run_ok(bin().arg("simulate").arg("--config").arg(&cfg));
    let out = bin()
        .args(["reconstruct", "--method", "latent", "--config"])
        .arg(&cfg)
        .arg("--sinogram")
        .arg(dir.join("sinogram_stride4.f32"))
        .output()
        .unwrap();
    let err = error_json(&out);
    assert!(err["error"]["message"].as_str().unwrap().contains("checkpoint"));
}

#[test]
fn errors_are_reported_as_json() {
    let out = bin().args(["sweep", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");

    let tmp = tempfile::tempdir().unwrap();
    let out = bin().arg("simulate").arg("--output-dir").arg(tmp.path()).args(["--set", "geometry.n_views=0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "invalid_input");

    let out = bin().arg("reconstruct").args(["--method", "ir", "--sinogram", "/nonexistent/x.f32"]).output().unwrap();
    assert_eq!(error_json(&out)["error"]["kind"], "io");
}

#[test]
fn sweep_lists_every_missing_checkpoint_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let cfg = write_config(&dir, &small_config(&dir));
    let out = bin()
        .args(["sweep", "t_sweep", "--config"])
        .arg(&cfg)
        .args(["--set", "sweep.checkpoints.5=\"/nowhere/t5.ckpt\""])
        .output()
        .unwrap();
    let msg = error_json(&out)["error"]["message"].as_str().unwrap().to_string();
    for needle in ["T=1", "T=5", "/nowhere/t5.ckpt", "T=10"] {
        assert!(msg.contains(needle), "{needle} missing from {msg}");
    }
    assert!(!dir.join("sweep_t_sweep.csv").exists());
}

#[test]
fn sweeps_produce_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let mut cfg = small_config(&dir);
    for t in [1usize, 2, 5, 10] {
        let ckpt = train_small(&dir.join(format!("m{t}")), t);
        cfg["sweep"]["checkpoints"][t.to_string()] = json!(ckpt);
    }
    cfg["sweep"]["t_values"] = json!([1, 5, 10]);
    let path = write_config(&dir, &cfg);
    let sweep = |name: &str| {
        run_ok(bin().args(["sweep", name, "--config"]).arg(&path));
        read_metrics_csv(&dir.join(format!("sweep_{name}.csv"))).unwrap()
    };

    let rows = sweep("t_sweep");
    assert_eq!(rows.len(), 15);
    assert_eq!(rows.iter().filter(|r| r.t == Some(10)).count(), 5);

    let rows = sweep("noise_fixed_vs_random");
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.method == "latent_fixed").count(), 2);

    let rows = sweep("beta1_sweep");
    assert_eq!(rows.len(), 4 * 5);
    assert!(rows.iter().all(|r| r.extra.iter().any(|(k, _)| k == "beta1")));

    let rows = sweep("sparsity");
    assert_eq!(rows.len(), 2);
    let strides: Vec<f64> =
        rows.iter().map(|r| r.extra.iter().find(|(k, _)| k == "stride").unwrap().1).collect();
    assert_eq!(strides, vec![4.0, 8.0]);

    let rows = sweep("methods");
    assert_eq!(rows.len(), 4 * 5);

    let summary = run_ok(bin().args(["evaluate", "--config"]).arg(&path).arg("--metrics-csv").arg(dir.join("sweep_methods.csv")));
    for key in ["ir", "ir_tv", "latent T=1", "sddpm_only T=1"] {
        assert_eq!(summary["summary"][key]["count"], 5, "{key}");
    }
}

#[test]
fn evaluate_scores_an_image_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let cfg = write_config(&dir, &small_config(&dir));
    run_ok(bin().arg("simulate").arg("--config").arg(&cfg));
    let out = run_ok(
        bin()
            .args(["evaluate", "--config"])
            .arg(&cfg)
            .arg("--reference")
            .arg(dir.join("phantom.f32"))
            .arg("--test")
            .arg(dir.join("phantom.f32")),
    );
    assert_eq!(out["summary"]["psnr_db"], "inf");
    assert_eq!(out["summary"]["ssim"], 1.0);
}

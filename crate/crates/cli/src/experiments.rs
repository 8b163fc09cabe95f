//! Reconstruction methods and experiment grids shared by the `reconstruct`
//! and `sweep` commands.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use latent_ct::diffusion::{train_model, DenoiserModel, NoiseSchedule, ScheduleSpec, TrainOutcome};
use latent_ct::geometry::project;
use latent_ct::io::{load_checkpoint, MetricRow};
use latent_ct::latent::{decode, init_latent, optimize_latent, FixedNoiseSet, LatentOptConfig, NoiseMode};
use latent_ct::metrics::MetricReport;
use latent_ct::phantom::{generate_phantom, phantom_suite, PhantomSpec};
use latent_ct::varrecon::{
    fidelity_loss, power_iteration_opnorm, reconstruct_ir_tv_with_history, reconstruct_ir_with_history,
    stable_step_size, IrConfig, TvConfig,
};
use latent_ct::{FanBeamGeometry, Image, Sinogram};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{IrSettings, LatentSettings, RunConfig};

/// Sparse-view data for one slice.
#[derive(Debug, Clone)]
pub struct Problem {
    pub id: String,
    pub geometry: FanBeamGeometry,
    pub sinogram: Sinogram,
    pub truth: Option<Image>,
}

impl Problem {
    /// Projects `truth` with every `stride`-th view of `base`.
    pub fn simulate(id: impl Into<String>, base: &FanBeamGeometry, truth: Image, stride: usize) -> Result<Self> {
        let geometry = base.with_stride(stride);
        let sinogram = project(&geometry, &truth)?;
        Ok(Self { id: id.into(), geometry, sinogram, truth: Some(truth) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    Ir,
    IrTv,
    SddpmOnly,
    Latent,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ir, Method::IrTv, Method::SddpmOnly, Method::Latent];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ir => "ir",
            Method::IrTv => "ir_tv",
            Method::SddpmOnly => "sddpm_only",
            Method::Latent => "latent",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::SddpmOnly | Method::Latent)
    }
}

/// A trained denoiser with the schedule it was trained on.
#[derive(Debug, Clone)]
pub struct Prior {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
}

impl Prior {
    pub fn new(model: DenoiserModel, spec: &ScheduleSpec) -> Result<Self> {
        let schedule = spec.build()?;
        ensure!(
            schedule.t_max() >= model.t_max(),
            "schedule has {} steps but the model covers {}",
            schedule.t_max(),
            model.t_max()
        );
        Ok(Self { model, schedule })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (model, header) =
            load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        Self::new(model, &header.schedule)
    }

    /// The same network paired with a different schedule, e.g. another `β_1`.
    pub fn with_schedule(&self, spec: &ScheduleSpec) -> Result<Self> {
        Self::new(self.model.clone(), spec)
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub image: Image,
    /// Fidelity loss `‖y − A x‖²` per iteration (objective for `ir_tv`).
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
    pub metrics: Option<MetricReport>,
}

pub fn ir_config(geom: &FanBeamGeometry, s: &IrSettings) -> Result<IrConfig> {
    let sigma = power_iteration_opnorm(geom, s.power_iterations)?;
    Ok(IrConfig::new(stable_step_size(sigma, None, s.step_fraction), s.n_iterations))
}

/// Latent optimizer settings for a chain of depth `s.t` under `sched`.
pub fn latent_config(geom: &FanBeamGeometry, sched: &NoiseSchedule, s: &LatentSettings) -> Result<LatentOptConfig> {
    ensure!(s.t >= 1 && s.t <= sched.t_max(), "latent T = {} outside the schedule's 1..={}", s.t, sched.t_max());
    let gamma = match s.gamma {
        Some(g) => g,
        None => {
            // ∂f/∂z is close to I/√ᾱ_T, so the fidelity curvature in z is ≈ σ²/ᾱ_T
            let sigma = power_iteration_opnorm(geom, 60)?;
            stable_step_size(sigma, None, s.step_fraction) * sched.alpha_bar(s.t)
        }
    };
    Ok(LatentOptConfig {
        gamma,
        n_iterations: s.n_iterations,
        t: s.t,
        noise_seed: s.noise_seed,
        init_seed: s.init_seed,
        noise_mode: s.noise_mode,
    })
}

pub struct MethodSettings<'a> {
    pub ir: &'a IrSettings,
    pub tv: &'a TvConfig,
    pub latent: &'a LatentSettings,
}

impl<'a> MethodSettings<'a> {
    pub fn from_config(cfg: &'a RunConfig) -> Self {
        Self { ir: &cfg.ir, tv: &cfg.tv, latent: &cfg.latent }
    }
}

pub fn run_method(method: Method, problem: &Problem, s: &MethodSettings, prior: Option<&Prior>) -> Result<MethodRun> {
    let geom = &problem.geometry;
    let y = &problem.sinogram;
    let ir_cfg = ir_config(geom, s.ir)?;
    let (image, loss_history) = match method {
        Method::Ir => {
            let out = reconstruct_ir_with_history(geom, y, &ir_cfg)?;
            (out.image, out.objective)
        }
        Method::IrTv => {
            let sigma = power_iteration_opnorm(geom, s.ir.power_iterations)?;
            let cfg = IrConfig { step_size: stable_step_size(sigma, Some(s.tv), s.ir.step_fraction), ..ir_cfg };
            let out = reconstruct_ir_tv_with_history(geom, y, &cfg, s.tv)?;
            (out.image, out.objective)
        }
        Method::SddpmOnly | Method::Latent => {
            let Some(prior) = prior else {
                bail!("method {} needs a trained denoiser checkpoint", method.name());
            };
            let cfg = latent_config(geom, &prior.schedule, s.latent)?;
            let chain = prior.schedule.truncated(cfg.t)?;
            let init = init_latent(geom, y, &chain, cfg.t, &ir_cfg, cfg.init_seed)?;
            if method == Method::SddpmOnly {
                let noises = FixedNoiseSet::draw(cfg.t, geom.image_size_px, cfg.noise_seed)?;
                (decode(&prior.model, &chain, &noises, &init.z)?, Vec::new())
            } else {
                let (image, state) = optimize_latent(geom, y, &prior.model, &chain, &cfg, init, None)?;
                (image, state.loss_history)
            }
        }
    };
    let final_loss = fidelity_loss(geom, &image, y)?;
    let metrics = problem.truth.as_ref().map(|t| MetricReport::evaluate(t, &image)).transpose()?;
    Ok(MethodRun { method, image, loss_history, final_loss, metrics })
}

/// Training phantoms described by the config's dataset section.
pub fn training_set(cfg: &RunConfig) -> Result<Vec<Image>> {
    let d = &cfg.dataset;
    let seeds = d.first_seed..d.first_seed + d.n_images as u64;
    Ok(phantom_suite(cfg.geometry.image_size_px, d.n_ellipses, seeds)?)
}

pub fn train_from_config(cfg: &RunConfig, progress: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    let data = training_set(cfg)?;
    let sched = cfg.model.schedule.build()?;
    let model = DenoiserModel::initialize(cfg.architecture(), sched.t_max(), cfg.train.rng_seed)?;
    Ok(train_model(model, &data, &sched, &cfg.train, progress)?)
}

/// Evaluation slices: random-ellipse phantoms seeded from the sweep section.
pub fn evaluation_suite(cfg: &RunConfig) -> Result<Vec<(String, Image)>> {
    let s = &cfg.sweep;
    (s.first_seed..s.first_seed + s.n_slices as u64)
        .map(|seed| {
            let spec = PhantomSpec::random_ellipses(cfg.geometry.image_size_px, s.n_ellipses, seed);
            Ok((format!("ellipses_{seed}"), generate_phantom(&spec)?))
        })
        .collect()
}

pub fn reference_phantom(cfg: &RunConfig) -> Result<Image> {
    Ok(generate_phantom(&cfg.phantom)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Sweep {
    NoiseFixedVsRandom,
    TSweep,
    Beta1Sweep,
    Sparsity,
    /// Every method on the evaluation suite.
    Methods,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::NoiseFixedVsRandom => "noise_fixed_vs_random",
            Sweep::TSweep => "t_sweep",
            Sweep::Beta1Sweep => "beta1_sweep",
            Sweep::Sparsity => "sparsity",
            Sweep::Methods => "methods",
        }
    }

    /// Chain depths whose checkpoints the sweep loads.
    pub fn required_depths(self, cfg: &RunConfig) -> Vec<usize> {
        let mut depths = match self {
            Sweep::NoiseFixedVsRandom => vec![cfg.sweep.noise_t],
            Sweep::TSweep => cfg.sweep.t_values.clone(),
            Sweep::Beta1Sweep => vec![1],
            Sweep::Sparsity | Sweep::Methods => vec![cfg.latent.t],
        };
        depths.sort_unstable();
        depths.dedup();
        depths
    }
}

/// Loads the checkpoint for every depth, after checking that all of them
/// are configured and present.
pub fn load_priors(cfg: &RunConfig, depths: &[usize]) -> Result<BTreeMap<usize, Prior>> {
    let mut missing = Vec::new();
    for &t in depths {
        match cfg.sweep.checkpoints.get(&t) {
            Some(p) if p.is_file() => {}
            Some(p) => missing.push(format!("T={t}: {}", p.display())),
            None => missing.push(format!("T={t}: not configured (sweep.checkpoints.{t})")),
        }
    }
    ensure!(missing.is_empty(), "missing checkpoints: {}", missing.join("; "));
    depths
        .iter()
        .map(|&t| {
            let path: &PathBuf = &cfg.sweep.checkpoints[&t];
            let prior = Prior::load(path)?;
            ensure!(
                prior.model.t_max() >= t,
                "checkpoint {} covers T ≤ {} but is registered for T = {t}",
                path.display(),
                prior.model.t_max()
            );
            Ok((t, prior))
        })
        .collect()
}

fn row(id: &str, method: &str, t: Option<usize>, run: &MethodRun, extra: Vec<(String, f64)>) -> MetricRow {
    let m = run.metrics.expect("sweep problems carry ground truth");
    let mut extra = extra;
    extra.push(("final_loss".into(), run.final_loss));
    MetricRow { slice_id: id.to_string(), method: method.to_string(), t, ssim: m.ssim, psnr_db: m.psnr_db, extra }
}

fn latent_settings(cfg: &RunConfig, t: usize) -> LatentSettings {
    LatentSettings { t, ..cfg.latent }
}

/// Runs one sweep grid. Grid points are independent and run in parallel;
/// rows come back in grid order.
pub fn run_sweep(sweep: Sweep, cfg: &RunConfig, priors: &BTreeMap<usize, Prior>) -> Result<Vec<MetricRow>> {
    let prior = |t: usize| priors.get(&t).with_context(|| format!("no checkpoint loaded for T = {t}"));
    let base = &cfg.geometry;
    match sweep {
        Sweep::NoiseFixedVsRandom => {
            let t = cfg.sweep.noise_t;
            let p = prior(t)?;
            let problem = Problem::simulate("reference", base, reference_phantom(cfg)?, cfg.sweep.stride)?;
            let grid: Vec<(u64, NoiseMode)> = cfg
                .sweep
                .noise_seeds
                .iter()
                .flat_map(|&s| [(s, NoiseMode::Fixed), (s, NoiseMode::Resampled)])
                .collect();
            grid.par_iter()
                .map(|&(seed, mode)| {
                    let latent = LatentSettings { noise_seed: seed, init_seed: seed, noise_mode: mode, ..latent_settings(cfg, t) };
                    let s = MethodSettings { ir: &cfg.ir, tv: &cfg.tv, latent: &latent };
                    let run = run_method(Method::Latent, &problem, &s, Some(p))?;
                    let method = match mode {
                        NoiseMode::Fixed => "latent_fixed",
                        NoiseMode::Resampled => "latent_resampled",
                    };
                    Ok(row(&format!("seed_{seed}"), method, Some(t), &run, vec![]))
                })
                .collect()
        }
        Sweep::TSweep => {
            let suite = simulate_suite(cfg)?;
            let grid: Vec<(usize, usize)> =
                cfg.sweep.t_values.iter().flat_map(|&t| (0..suite.len()).map(move |i| (t, i))).collect();
            grid.par_iter()
                .map(|&(t, i)| {
                    let latent = latent_settings(cfg, t);
                    let s = MethodSettings { ir: &cfg.ir, tv: &cfg.tv, latent: &latent };
                    let run = run_method(Method::Latent, &suite[i], &s, Some(prior(t)?))?;
                    Ok(row(&suite[i].id, "latent", Some(t), &run, vec![]))
                })
                .collect()
        }
        Sweep::Beta1Sweep => {
            let suite = simulate_suite(cfg)?;
            let base_prior = prior(1)?;
            let grid: Vec<(f64, usize)> =
                cfg.sweep.beta1_values.iter().flat_map(|&b| (0..suite.len()).map(move |i| (b, i))).collect();
            grid.par_iter()
                .map(|&(beta1, i)| {
                    let p = base_prior.with_schedule(&ScheduleSpec::Explicit { betas: vec![beta1] })?;
                    let latent = latent_settings(cfg, 1);
                    let s = MethodSettings { ir: &cfg.ir, tv: &cfg.tv, latent: &latent };
                    let run = run_method(Method::Latent, &suite[i], &s, Some(&p))?;
                    Ok(row(&suite[i].id, "latent", Some(1), &run, vec![("beta1".into(), beta1)]))
                })
                .collect()
        }
        Sweep::Sparsity => {
            let t = cfg.latent.t;
            let p = prior(t)?;
            let truth = reference_phantom(cfg)?;
            cfg.sweep
                .sparsity
                .par_iter()
                .map(|level| {
                    let problem = Problem::simulate("reference", base, truth.clone(), level.stride)?;
                    let latent = LatentSettings { n_iterations: level.n_iterations, ..latent_settings(cfg, t) };
                    let s = MethodSettings { ir: &cfg.ir, tv: &cfg.tv, latent: &latent };
                    let run = run_method(Method::Latent, &problem, &s, Some(p))?;
                    let extra = vec![
                        ("stride".into(), level.stride as f64),
                        ("n_iterations".into(), level.n_iterations as f64),
                    ];
                    Ok(row("reference", "latent", Some(t), &run, extra))
                })
                .collect()
        }
        Sweep::Methods => {
            let t = cfg.latent.t;
            let p = prior(t)?;
            let suite = simulate_suite(cfg)?;
            let grid: Vec<(usize, Method)> =
                (0..suite.len()).flat_map(|i| Method::ALL.into_iter().map(move |m| (i, m))).collect();
            let settings = MethodSettings::from_config(cfg);
            grid.par_iter()
                .map(|&(i, m)| {
                    let run = run_method(m, &suite[i], &settings, Some(p))?;
                    Ok(row(&suite[i].id, m.name(), m.needs_model().then_some(t), &run, vec![]))
                })
                .collect()
        }
    }
}

fn simulate_suite(cfg: &RunConfig) -> Result<Vec<Problem>> {
    evaluation_suite(cfg)?
        .into_iter()
        .map(|(id, truth)| Problem::simulate(id, &cfg.geometry, truth, cfg.sweep.stride))
        .collect()
}

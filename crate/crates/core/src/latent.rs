//! Reconstruction in the latent space of a shallow diffusion model.
//!
//! With a fixed set of reverse-process noises `u_1 = 0, u_2..u_T`, the
//! reverse chain `x_T → x_{T−1} → … → x_0` becomes a deterministic map
//! `x_0 = f(z)` of the latent `z = x_T`. Reconstruction minimizes
//! `‖y − A f(z)‖²` over `z` by plain gradient descent, starting from a
//! forward-diffused least-squares reconstruction, and reports `f(z)`.
//!
//! Gradients flow through the chain by composing per-step vector-Jacobian
//! products; the `T` step inputs are stored during decoding and the network
//! intermediates of each step are recomputed on the way back.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, reverse_step, reverse_step_vjp, NoisePredictor, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::geometry::{backproject, project, FanBeamGeometry};
use crate::image::{Image, Sinogram};
use crate::rng::{self, standard_normal_image, SeededRng};
use crate::varrecon::{reconstruct_ir, IrConfig};

const NOISE_STREAM: u64 = 0x5eed_0001;
const INIT_STREAM: u64 = 0x5eed_0002;

/// The reverse-process noises `u_1..u_T`, with `u_1 ≡ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedNoiseSet {
    seed: Option<u64>,
    noises: Vec<Image>,
}

impl FixedNoiseSet {
    /// Draws `u_2..u_T` from the standard normal; a function of
    /// `(seed, t, size)` only.
    pub fn draw(t: usize, size: usize, seed: u64) -> Result<Self> {
        ensure!(t >= 1 && size > 0, "noise set needs T ≥ 1 and a positive image size");
        let mut rng = rng::derived(seed, NOISE_STREAM);
        Ok(Self { seed: Some(seed), noises: draw_noises(&mut rng, t, size) })
    }

    /// All noises zero.
    pub fn zeros(t: usize, size: usize) -> Result<Self> {
        ensure!(t >= 1 && size > 0, "noise set needs T ≥ 1 and a positive image size");
        Ok(Self { seed: None, noises: vec![Image::zeros(size); t] })
    }

    pub fn t(&self) -> usize {
        self.noises.len()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn image_size(&self) -> usize {
        self.noises[0].size()
    }

    /// `u_t` for `1 ≤ t ≤ T`.
    pub fn get(&self, t: usize) -> &Image {
        &self.noises[t - 1]
    }
}

fn draw_noises(rng: &mut SeededRng, t: usize, size: usize) -> Vec<Image> {
    std::iter::once(Image::zeros(size))
        .chain((2..=t).map(|_| standard_normal_image(rng, size)))
        .collect()
}

fn check_chain(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    noises: &FixedNoiseSet,
    z: &Image,
) -> Result<()> {
    let t = noises.t();
    ensure!(
        sched.t_max() == t,
        "noise set has T = {t} but the schedule has T = {}",
        sched.t_max()
    );
    ensure!(model.t_max() >= t, "model covers T ≤ {} but T = {t} was requested", model.t_max());
    ensure!(
        z.size() == noises.image_size(),
        "latent is {0}x{0} but the noises are {1}x{1}",
        z.size(),
        noises.image_size()
    );
    Ok(())
}

/// `f(z)`: runs the reverse step for `t = T, …, 1` with the fixed noises.
pub fn decode(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    noises: &FixedNoiseSet,
    z: &Image,
) -> Result<Image> {
    Ok(decode_with_states(model, sched, noises, z)?.0)
}

/// [`decode`] that also returns the step inputs `[x_T, …, x_1]`.
pub fn decode_with_states(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    noises: &FixedNoiseSet,
    z: &Image,
) -> Result<(Image, Vec<Image>)> {
    check_chain(model, sched, noises, z)?;
    let mut states = Vec::with_capacity(noises.t());
    let mut x = z.clone();
    for t in (1..=noises.t()).rev() {
        let next = reverse_step(model, sched, &x, t, noises.get(t))?;
        states.push(std::mem::replace(&mut x, next));
    }
    Ok((x, states))
}

/// `(∂f/∂z)ᵀ · cotangent`.
pub fn decode_vjp(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    noises: &FixedNoiseSet,
    z: &Image,
    cotangent: &Image,
) -> Result<Image> {
    ensure!(cotangent.same_shape(z), "cotangent shape differs from latent");
    let (_, states) = decode_with_states(model, sched, noises, z)?;
    vjp_through_states(model, sched, &states, cotangent)
}

/// Pulls a cotangent on `x_0` back to `x_T` given the stored step inputs.
fn vjp_through_states(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    states: &[Image],
    cotangent: &Image,
) -> Result<Image> {
    let t_max = states.len();
    let mut w = cotangent.clone();
    for t in 1..=t_max {
        w = reverse_step_vjp(model, sched, &states[t_max - t], t, &w)?;
    }
    Ok(w)
}

/// Whether the reverse-process noises stay fixed during optimization or are
/// redrawn every iteration (the stochastic reverse process, kept for
/// comparison).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Fixed,
    Resampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentOptConfig {
    /// Gradient-descent step on the latent.
    pub gamma: f64,
    pub n_iterations: usize,
    /// Depth of the reverse chain.
    pub t: usize,
    pub noise_seed: u64,
    pub init_seed: u64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
}

impl LatentOptConfig {
    fn validate(&self) -> Result<()> {
        ensure!(self.gamma >= 0.0 && self.gamma.is_finite(), "gamma must be nonnegative");
        ensure!(self.t >= 1, "T must be at least 1");
        Ok(())
    }
}

/// Optimization state: the latent and the fidelity loss of `f(z)` before
/// every update.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Image,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    /// Loss of the returned reconstruction, after the last update.
    pub final_loss: Option<f64>,
}

impl LatentState {
    pub fn new(z: Image) -> Self {
        Self { z, iteration: 0, loss_history: Vec::new(), final_loss: None }
    }
}

/// `z = √ᾱ_T·x + √β̄_T·ε` for a given starting image `x`.
pub fn noised_latent(x: &Image, sched: &NoiseSchedule, t: usize, seed: u64) -> Result<LatentState> {
    let mut rng = rng::derived(seed, INIT_STREAM);
    let eps = standard_normal_image(&mut rng, x.size());
    Ok(LatentState::new(forward_sample(sched, x, t, &eps)?))
}

/// Initial latent `z ~ q(x_T | IR(y))`.
pub fn init_latent(
    geom: &FanBeamGeometry,
    y: &Sinogram,
    sched: &NoiseSchedule,
    t: usize,
    ir_cfg: &IrConfig,
    seed: u64,
) -> Result<LatentState> {
    let ir = reconstruct_ir(geom, y, ir_cfg)?;
    noised_latent(&ir, sched, t, seed)
}

/// Full pipeline: `IR(y)`, forward diffusion to `T`, then latent descent.
/// Returns `f(z_final)` and the optimization state.
pub fn reconstruct_latent(
    geom: &FanBeamGeometry,
    y: &Sinogram,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &LatentOptConfig,
    ir_cfg: &IrConfig,
) -> Result<(Image, LatentState)> {
    cfg.validate()?;
    let chain = sched.truncated(cfg.t)?;
    let init = init_latent(geom, y, &chain, cfg.t, ir_cfg, cfg.init_seed)?;
    optimize_latent(geom, y, model, &chain, cfg, init, None)
}

/// Gradient descent `z ← z − γ·∇_z ‖y − A f(z)‖²` from `init`.
///
/// `sched` must have exactly `cfg.t` steps. `noises` overrides the noise set
/// drawn from `cfg.noise_seed` (fixed mode only).
pub fn optimize_latent(
    geom: &FanBeamGeometry,
    y: &Sinogram,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &LatentOptConfig,
    init: LatentState,
    noises: Option<FixedNoiseSet>,
) -> Result<(Image, LatentState)> {
    cfg.validate()?;
    geom.validate()?;
    let (views, dets) = geom.sinogram_shape();
    ensure!(
        y.n_views() == views && y.n_detectors() == dets,
        "data sinogram is {}x{} but the geometry expects {views}x{dets}",
        y.n_views(),
        y.n_detectors()
    );
    ensure!(
        init.z.size() == geom.image_size_px,
        "latent is {0}x{0} but the geometry expects {1}x{1}",
        init.z.size(),
        geom.image_size_px
    );
    ensure!(
        noises.is_none() || cfg.noise_mode == NoiseMode::Fixed,
        "an explicit noise set only makes sense with fixed noises"
    );
    let size = geom.image_size_px;
    let mut noise_rng = rng::derived(cfg.noise_seed, NOISE_STREAM);
    let mut noises = match noises {
        Some(n) => n,
        None => FixedNoiseSet { seed: Some(cfg.noise_seed), noises: draw_noises(&mut noise_rng, cfg.t, size) },
    };
    ensure!(noises.t() == cfg.t, "noise set has T = {} but the config asks for {}", noises.t(), cfg.t);

    let mut state = init;
    for _ in 0..cfg.n_iterations {
        let iteration = state.iteration;
        let (x0, states) = decode_with_states(model, sched, &noises, &state.z)?;
        let residual = project(geom, &x0)?.sub(y);
        let loss = residual.norm_sq();
        if !loss.is_finite() {
            return Err(Error::LatentDiverged { iteration });
        }
        let cotangent = backproject(geom, &residual.scaled(2.0))?;
        let grad = vjp_through_states(model, sched, &states, &cotangent)?;
        state.z.add_scaled(-cfg.gamma, &grad);
        if !state.z.is_finite() {
            return Err(Error::LatentDiverged { iteration });
        }
        state.loss_history.push(loss);
        state.iteration += 1;
        if cfg.noise_mode == NoiseMode::Resampled {
            noises.noises = draw_noises(&mut noise_rng, cfg.t, size);
        }
    }

    let x0 = decode(model, sched, &noises, &state.z)?;
    let final_loss = project(geom, &x0)?.sub(y).norm_sq();
    if !final_loss.is_finite() {
        return Err(Error::LatentDiverged { iteration: state.iteration });
    }
    state.final_loss = Some(final_loss);
    Ok((x0, state))
}

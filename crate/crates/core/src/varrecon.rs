//! Classical iterative reconstruction: least squares `‖y − Ax‖²` and its
//! TV-regularized variant, both minimized by fixed-step gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{backproject, project, FanBeamGeometry};
use crate::image::{Image, Sinogram};

/// Consecutive objective increases tolerated before a run is declared
/// divergent.
const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrInit {
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrConfig {
    pub step_size: f64,
    pub n_iterations: usize,
    pub init: IrInit,
}

impl IrConfig {
    /// Default iteration budget when the result initializes a latent
    /// reconstruction.
    pub const DEFAULT_ITERATIONS: usize = 200;

    pub fn new(step_size: f64, n_iterations: usize) -> Self {
        Self { step_size, n_iterations, init: IrInit::Zeros }
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.step_size > 0.0 && self.step_size.is_finite(),
            "IR step size must be positive, got {}",
            self.step_size
        );
        Ok(())
    }

    fn initial_image(&self, size: usize) -> Image {
        match self.init {
            IrInit::Zeros => Image::zeros(size),
            IrInit::Constant(c) => Image::filled(size, c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvConfig {
    pub lambda: f64,
    #[serde(default = "TvConfig::default_epsilon")]
    pub epsilon_smooth: f64,
}

impl TvConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-6;

    fn default_epsilon() -> f64 {
        Self::DEFAULT_EPSILON
    }

    pub fn new(lambda: f64) -> Self {
        Self { lambda, epsilon_smooth: Self::DEFAULT_EPSILON }
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), "TV lambda must be nonnegative");
        ensure!(self.epsilon_smooth > 0.0, "TV smoothing epsilon must be positive");
        Ok(())
    }

    /// Lipschitz constant of `λ·∇TV`: the smoothed absolute value has
    /// curvature at most `1/ε`, and the forward-difference operator has
    /// squared norm at most 8 on a 2D grid.
    pub fn gradient_lipschitz(&self) -> f64 {
        8.0 * self.lambda / self.epsilon_smooth
    }
}

/// Final iterate plus the objective at every iterate (initial one included).
#[derive(Debug, Clone)]
pub struct IrOutcome {
    pub image: Image,
    pub objective: Vec<f64>,
}

fn check_data(geom: &FanBeamGeometry, y: &Sinogram) -> Result<()> {
    let (views, dets) = geom.sinogram_shape();
    ensure!(
        y.n_views() == views && y.n_detectors() == dets,
        "data sinogram is {}x{} but the geometry expects {views}x{dets}",
        y.n_views(),
        y.n_detectors()
    );
    Ok(())
}

/// `‖y − A x‖²`
pub fn fidelity_loss(geom: &FanBeamGeometry, image: &Image, y: &Sinogram) -> Result<f64> {
    check_data(geom, y)?;
    let residual = project(geom, image)?.sub(y);
    Ok(residual.norm_sq())
}

/// `2 Aᵀ(A x − y)`
pub fn fidelity_gradient(geom: &FanBeamGeometry, image: &Image, y: &Sinogram) -> Result<Image> {
    Ok(fidelity_loss_and_gradient(geom, image, y)?.1)
}

/// Loss and gradient sharing one projection.
pub fn fidelity_loss_and_gradient(
    geom: &FanBeamGeometry,
    image: &Image,
    y: &Sinogram,
) -> Result<(f64, Image)> {
    check_data(geom, y)?;
    let residual = project(geom, image)?.sub(y);
    let loss = residual.norm_sq();
    let grad = backproject(geom, &residual.scaled(2.0))?;
    Ok((loss, grad))
}

/// Smoothed absolute value `√(d² + ε²) − ε`, written to avoid cancellation.
fn smooth_abs(d: f64, eps: f64) -> f64 {
    d * d / ((d * d + eps * eps).sqrt() + eps)
}

fn smooth_abs_derivative(d: f64, eps: f64) -> f64 {
    d / (d * d + eps * eps).sqrt()
}

/// Anisotropic smoothed total variation with forward differences and a
/// zero-flux boundary. `λ` is not applied.
pub fn tv_value(image: &Image, cfg: &TvConfig) -> f64 {
    let n = image.size();
    let eps = cfg.epsilon_smooth;
    let mut total = 0.0;
    for r in 0..n {
        for c in 0..n {
            let x = image.get(r, c);
            if c + 1 < n {
                total += smooth_abs(image.get(r, c + 1) - x, eps);
            }
            if r + 1 < n {
                total += smooth_abs(image.get(r + 1, c) - x, eps);
            }
        }
    }
    total
}

/// Gradient of [`tv_value`].
pub fn tv_gradient(image: &Image, cfg: &TvConfig) -> Image {
    let n = image.size();
    let eps = cfg.epsilon_smooth;
    let mut grad = Image::zeros(n);
    let g = grad.data_mut();
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            let x = image.get(r, c);
            if c + 1 < n {
                let w = smooth_abs_derivative(image.get(r, c + 1) - x, eps);
                g[i + 1] += w;
                g[i] -= w;
            }
            if r + 1 < n {
                let w = smooth_abs_derivative(image.get(r + 1, c) - x, eps);
                g[i + n] += w;
                g[i] -= w;
            }
        }
    }
    grad
}

/// `IR(y)`: gradient descent on `‖y − Ax‖²`.
pub fn reconstruct_ir(geom: &FanBeamGeometry, y: &Sinogram, cfg: &IrConfig) -> Result<Image> {
    Ok(reconstruct_ir_with_history(geom, y, cfg)?.image)
}

pub fn reconstruct_ir_with_history(
    geom: &FanBeamGeometry,
    y: &Sinogram,
    cfg: &IrConfig,
) -> Result<IrOutcome> {
    descend(geom, y, cfg, None)
}

/// Gradient descent on `‖y − Ax‖² + λ·TV(x)`.
pub fn reconstruct_ir_tv(
    geom: &FanBeamGeometry,
    y: &Sinogram,
    ir_cfg: &IrConfig,
    tv_cfg: &TvConfig,
) -> Result<Image> {
    Ok(reconstruct_ir_tv_with_history(geom, y, ir_cfg, tv_cfg)?.image)
}

pub fn reconstruct_ir_tv_with_history(
    geom: &FanBeamGeometry,
    y: &Sinogram,
    ir_cfg: &IrConfig,
    tv_cfg: &TvConfig,
) -> Result<IrOutcome> {
    tv_cfg.validate()?;
    descend(geom, y, ir_cfg, Some(tv_cfg))
}

fn descend(
    geom: &FanBeamGeometry,
    y: &Sinogram,
    cfg: &IrConfig,
    tv: Option<&TvConfig>,
) -> Result<IrOutcome> {
    geom.validate()?;
    cfg.validate()?;
    check_data(geom, y)?;
    let tv = tv.filter(|t| t.lambda > 0.0);

    let objective_and_gradient = |x: &Image| -> Result<(f64, Image)> {
        let (mut value, mut grad) = fidelity_loss_and_gradient(geom, x, y)?;
        if let Some(tv) = tv {
            value += tv.lambda * tv_value(x, tv);
            grad.add_scaled(tv.lambda, &tv_gradient(x, tv));
        }
        Ok((value, grad))
    };

    let mut x = cfg.initial_image(geom.image_size_px);
    let mut objective = Vec::with_capacity(cfg.n_iterations + 1);
    let mut increases = 0;
    for iteration in 0..cfg.n_iterations {
        let (value, grad) = objective_and_gradient(&x)?;
        track(&mut objective, &mut increases, value, cfg.step_size, iteration)?;
        x.add_scaled(-cfg.step_size, &grad);
    }
    let final_value = fidelity_loss(geom, &x, y)?
        + tv.map_or(0.0, |tv| tv.lambda * tv_value(&x, tv));
    track(&mut objective, &mut increases, final_value, cfg.step_size, cfg.n_iterations)?;
    Ok(IrOutcome { image: x, objective })
}

fn track(
    history: &mut Vec<f64>,
    increases: &mut usize,
    value: f64,
    step_size: f64,
    iteration: usize,
) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Diverged { step_size, iteration });
    }
    if let Some(&prev) = history.last() {
        if value > prev {
            *increases += 1;
            if *increases >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged { step_size, iteration });
            }
        } else {
            *increases = 0;
        }
    }
    history.push(value);
    Ok(())
}

/// Estimates `‖A‖₂` by power iteration on `AᵀA` from the all-ones image,
/// returning the square root of the final Rayleigh quotient. The estimate
/// is nondecreasing in `n_iter`.
pub fn power_iteration_opnorm(geom: &FanBeamGeometry, n_iter: usize) -> Result<f64> {
    ensure!(n_iter >= 1, "power iteration needs at least one iteration");
    geom.validate()?;
    let normal = |v: &Image| -> Result<Image> { backproject(geom, &project(geom, v)?) };
    let mut v = Image::filled(geom.image_size_px, 1.0);
    for _ in 1..n_iter {
        let w = normal(&v)?;
        let norm = w.norm_sq().sqrt();
        ensure!(norm > 0.0, "the system matrix annihilates the iterate; no ray hits the image");
        v = w.scaled(1.0 / norm);
    }
    let rayleigh = v.dot(&normal(&v)?) / v.norm_sq();
    Ok(rayleigh.max(0.0).sqrt())
}

/// A step size giving monotone descent: `fraction / (‖A‖² + Lip(λ∇TV)/2)`,
/// since the objective's gradient is Lipschitz with constant
/// `2‖A‖² + 8λ/ε`. `fraction` must lie in `(0, 1)`.
pub fn stable_step_size(opnorm: f64, tv: Option<&TvConfig>, fraction: f64) -> f64 {
    let curvature = opnorm * opnorm + tv.map_or(0.0, |t| t.gradient_lipschitz() / 2.0);
    fraction / curvature
}

//! The shallow diffusion model: schedule, noise predictor, training and the
//! single reverse step.

mod kernels;
mod model;
mod schedule;
mod train;

pub use model::{Architecture, DenoiserModel};
pub use schedule::{cosine_schedule, NoiseSchedule, ScheduleSpec, COSINE_HORIZON, COSINE_OFFSET};
pub use train::{train, train_model, AdamConfig, TrainConfig, TrainOutcome};

use rand::Rng;

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rng::standard_normal_image;

/// Anything that predicts the noise in `x_t`. Implemented by the trained
/// [`DenoiserModel`] and by [`ZeroPredictor`].
pub trait NoisePredictor {
    /// Required input side length, if the predictor is size-specific.
    fn image_size(&self) -> Option<usize>;
    fn t_max(&self) -> usize;
    fn predict(&self, x: &Image, t: usize) -> Result<Image>;
    /// `(∂ε/∂x)ᵀ · cotangent` at `(x, t)`.
    fn input_vjp(&self, x: &Image, t: usize, cotangent: &Image) -> Result<Image>;
}

/// `ε ≡ 0`. Reduces the reverse process to a fixed linear map.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub t_max: usize,
}

impl NoisePredictor for ZeroPredictor {
    fn image_size(&self) -> Option<usize> {
        None
    }

    fn t_max(&self) -> usize {
        self.t_max
    }

    fn predict(&self, x: &Image, _t: usize) -> Result<Image> {
        Ok(Image::zeros(x.size()))
    }

    fn input_vjp(&self, x: &Image, _t: usize, _cotangent: &Image) -> Result<Image> {
        Ok(Image::zeros(x.size()))
    }
}

/// `x_t = √ᾱ_t·x0 + √β̄_t·ε` with caller-supplied `ε`.
pub fn forward_sample(sched: &NoiseSchedule, x0: &Image, t: usize, eps: &Image) -> Result<Image> {
    sched.check_timestep(t)?;
    ensure!(x0.same_shape(eps), "noise shape differs from image");
    let (a, b) = (sched.alpha_bar(t).sqrt(), sched.beta_bar(t).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Image::from_vec_unchecked(x0.size(), data))
}

/// Coefficients of one reverse step,
/// `x_{t−1} = inv_sqrt_alpha·(x_t − eps_coef·ε_θ) + noise_scale·u_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub inv_sqrt_alpha: f64,
    pub eps_coef: f64,
    pub noise_scale: f64,
}

impl ReverseCoefficients {
    pub fn at(sched: &NoiseSchedule, t: usize) -> Result<Self> {
        sched.check_timestep(t)?;
        Ok(Self {
            inv_sqrt_alpha: 1.0 / sched.alpha(t).sqrt(),
            eps_coef: sched.beta(t) / sched.beta_bar(t).sqrt(),
            noise_scale: sched.sigma(t),
        })
    }
}

fn check_predictor(model: &dyn NoisePredictor, x: &Image, t: usize) -> Result<()> {
    ensure!(t <= model.t_max(), "timestep {t} exceeds the model's T_max {}", model.t_max());
    if let Some(size) = model.image_size() {
        ensure!(x.size() == size, "model expects {size}x{size} images, got {0}x{0}", x.size());
    }
    Ok(())
}

/// One reverse-process step with the caller-supplied noise `u_t`.
pub fn reverse_step(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    x_t: &Image,
    t: usize,
    u_t: &Image,
) -> Result<Image> {
    let k = ReverseCoefficients::at(sched, t)?;
    check_predictor(model, x_t, t)?;
    ensure!(u_t.same_shape(x_t), "reverse noise shape differs from image");
    let eps = model.predict(x_t, t)?;
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .zip(u_t.data())
        .map(|((x, e), u)| k.inv_sqrt_alpha * (x - k.eps_coef * e) + k.noise_scale * u)
        .collect();
    Ok(Image::from_vec_unchecked(x_t.size(), data))
}

/// Transposed Jacobian of [`reverse_step`] with respect to `x_t`, applied to
/// `cotangent`: `(1/√α_t)(w − (β_t/√β̄_t)·(∂ε_θ/∂x_t)ᵀ w)`. The noise term
/// does not depend on `x_t`.
pub fn reverse_step_vjp(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    x_t: &Image,
    t: usize,
    cotangent: &Image,
) -> Result<Image> {
    let k = ReverseCoefficients::at(sched, t)?;
    check_predictor(model, x_t, t)?;
    let back = model.input_vjp(x_t, t, cotangent)?;
    let data = cotangent
        .data()
        .iter()
        .zip(back.data())
        .map(|(w, b)| k.inv_sqrt_alpha * (w - k.eps_coef * b))
        .collect();
    Ok(Image::from_vec_unchecked(x_t.size(), data))
}

/// Mean over `draws` held-out samples of `‖ε − ε_θ(x_t, t)‖²`, with `x0`
/// cycling through `images`, `t` uniform and `ε` standard normal. The zero
/// predictor scores the pixel count in expectation.
pub fn heldout_eps_error(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    images: &[Image],
    draws: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    ensure!(!images.is_empty() && draws > 0, "need at least one image and one draw");
    let t_max = model.t_max().min(sched.t_max());
    let mut total = 0.0;
    for i in 0..draws {
        let x0 = &images[i % images.len()];
        let t = rng.random_range(1..=t_max);
        let eps = standard_normal_image(rng, x0.size());
        let x_t = forward_sample(sched, x0, t, &eps)?;
        let pred = model.predict(&x_t, t)?;
        total += eps.data().iter().zip(pred.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / draws as f64)
}

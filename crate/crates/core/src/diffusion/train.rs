use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, DenoiserModel};
use super::schedule::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::rng::{self, standard_normal_image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive"
        );
        ensure!(self.batch_size > 0, "batch size must be positive");
        ensure!(self.n_epochs > 0, "epoch count must be positive");
        Ok(())
    }

    pub fn steps_for(&self, dataset_len: usize) -> usize {
        self.n_epochs * dataset_len.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    /// Batch-mean per-pixel squared error `‖ε − ε_θ‖²/N`, one entry per
    /// optimizer step.
    pub losses: Vec<f64>,
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, lr: f64, n: usize) -> Self {
        Self { cfg, lr, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
    }
}

/// Trains a freshly initialized denoiser. The seed fixes both the initial
/// weights and every `(x0, t, ε)` draw.
pub fn train(
    dataset: &[Image],
    sched: &NoiseSchedule,
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = DenoiserModel::initialize(arch, sched.t_max(), cfg.rng_seed)?;
    train_model(model, dataset, sched, cfg, |_, _| {})
}

/// Runs the denoising objective on `model`: per sample draw `t` uniformly
/// from `1..=T`, `ε ~ N(0, I)`, form `x_t`, and step Adam on
/// `‖ε − ε_θ(x_t, t)‖²`. Each epoch visits the dataset in a fresh shuffled
/// order. `progress(step, loss)` is called after every optimizer step.
pub fn train_model(
    mut model: DenoiserModel,
    dataset: &[Image],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!dataset.is_empty(), "training dataset is empty");
    let size = model.architecture().image_size;
    ensure!(
        dataset.iter().all(|img| img.size() == size),
        "every training image must be {size}x{size}"
    );
    ensure!(
        model.t_max() <= sched.t_max(),
        "model covers {} steps but the schedule only {}",
        model.t_max(),
        sched.t_max()
    );

    let t_max = model.t_max();
    let pixels = (size * size) as f64;
    let mut rng = rng::derived(cfg.rng_seed, 0x7124);
    let mut adam = Adam::new(cfg.adam, cfg.learning_rate, model.param_count());
    let mut grads = vec![0.0; model.param_count()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(cfg.steps_for(dataset.len()));

    for _epoch in 0..cfg.n_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / (batch.len() as f64 * pixels);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let t = rng.random_range(1..=t_max);
                let eps = standard_normal_image(&mut rng, size);
                let x_t = super::forward_sample(sched, &dataset[idx], t, &eps)?;
                model.accumulate_param_grad(x_t.data(), t, &mut grads, |pred| {
                    pred.iter()
                        .zip(eps.data())
                        .map(|(p, e)| {
                            batch_loss += (e - p) * (e - p) * scale;
                            2.0 * (p - e) * scale
                        })
                        .collect()
                });
            }
            let step = losses.len();
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss: batch_loss });
            }
            adam.update(model.params_mut(), &grads);
            losses.push(batch_loss);
            progress(step, batch_loss);
        }
    }
    Ok(TrainOutcome { model, losses })
}

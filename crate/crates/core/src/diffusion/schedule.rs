use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// The cosine schedule's time normalization; kept at 1000 for every `T_max`
/// so shallow schedules reuse the early segment of the deep one.
pub const COSINE_HORIZON: f64 = 1000.0;

/// Standard cosine-schedule offset.
pub const COSINE_OFFSET: f64 = 0.008;

/// How a [`NoiseSchedule`] was built; stored in checkpoints and manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Cosine { t_max: usize, s: f64 },
    /// Explicit per-step variances `β_1..β_T`.
    Explicit { betas: Vec<f64> },
}

impl ScheduleSpec {
    pub fn cosine(t_max: usize) -> Self {
        ScheduleSpec::Cosine { t_max, s: COSINE_OFFSET }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleSpec::Cosine { t_max, s } => cosine_schedule(*t_max, *s),
            ScheduleSpec::Explicit { betas } => NoiseSchedule::from_betas(betas),
        }
    }

    pub fn t_max(&self) -> usize {
        match self {
            ScheduleSpec::Cosine { t_max, .. } => *t_max,
            ScheduleSpec::Explicit { betas } => betas.len(),
        }
    }
}

/// Per-step noise variances and their cumulative products.
///
/// All arrays are indexed by the timestep `t` directly; index 0 holds the
/// `t = 0` boundary values (`α_0 = ᾱ_0 = 1`, `β_0 = β̄_0 = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Cosine schedule: `ᾱ_t = g(t)/g(0)` with
/// `g(t) = cos²(((t/1000 + s)/(1 + s))·π/2)` and `β_t = 1 − ᾱ_t/ᾱ_{t−1}`.
pub fn cosine_schedule(t_max: usize, s: f64) -> Result<NoiseSchedule> {
    ensure!(t_max >= 1, "schedule needs at least one step");
    ensure!(
        t_max as f64 <= COSINE_HORIZON,
        "cosine schedule is defined for T_max ≤ {COSINE_HORIZON}, got {t_max}"
    );
    ensure!(s > 0.0 && s.is_finite(), "cosine offset s must be positive");

    let phase = |t: usize| (t as f64 / COSINE_HORIZON + s) / (1.0 + s) * FRAC_PI_2;
    let g = |t: usize| phase(t).cos().powi(2);
    // phase(t) − phase(t−1), free of cancellation
    let phase_step = FRAC_PI_2 / (COSINE_HORIZON * (1.0 + s));

    let g0 = g(0);
    let mut beta = vec![0.0; t_max + 1];
    let mut alpha = vec![1.0; t_max + 1];
    let mut alpha_bar = vec![1.0; t_max + 1];
    for t in 1..=t_max {
        let (g_prev, g_t) = (g(t - 1), g(t));
        let ratio = g_t / g_prev;
        alpha_bar[t] = g_t / g0;
        if ratio >= 0.5 {
            // cos²a − cos²b = sin(a + b)·sin(b − a)
            beta[t] = (phase(t) + phase(t - 1)).sin() * phase_step.sin() / g_prev;
            alpha[t] = 1.0 - beta[t];
        } else {
            alpha[t] = ratio;
            beta[t] = 1.0 - ratio;
        }
    }
    Ok(NoiseSchedule::assemble(ScheduleSpec::Cosine { t_max, s }, beta, alpha, alpha_bar))
}

impl NoiseSchedule {
    /// Schedule from explicit variances, e.g. a single `β_1` for the
    /// noise-strength sweep.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        ensure!(!betas.is_empty(), "schedule needs at least one step");
        ensure!(
            betas.iter().all(|&b| b > 0.0 && b <= 1.0),
            "every beta must lie in (0, 1]"
        );
        ensure!(
            betas.windows(2).all(|w| w[0] < w[1]),
            "betas must be strictly increasing"
        );
        let t_max = betas.len();
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha = vec![1.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            beta[t] = betas[t - 1];
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(Self::assemble(ScheduleSpec::Explicit { betas: betas.to_vec() }, beta, alpha, alpha_bar))
    }

    fn assemble(spec: ScheduleSpec, beta: Vec<f64>, alpha: Vec<f64>, alpha_bar: Vec<f64>) -> Self {
        let beta_bar = alpha_bar.iter().map(|a| 1.0 - a).collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Self { spec, beta, alpha, alpha_bar, beta_bar, sigma }
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn t_max(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    /// Reverse-step noise scale `σ_t = √β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.t_max()).contains(&t),
            "timestep {t} outside 1..={}",
            self.t_max()
        );
        Ok(())
    }

    /// The first `t_max` steps of this schedule.
    pub fn truncated(&self, t_max: usize) -> Result<Self> {
        ensure!(
            (1..=self.t_max()).contains(&t_max),
            "cannot truncate a {}-step schedule to {t_max} steps",
            self.t_max()
        );
        let spec = match &self.spec {
            ScheduleSpec::Cosine { s, .. } => ScheduleSpec::Cosine { t_max, s: *s },
            ScheduleSpec::Explicit { betas } => ScheduleSpec::Explicit { betas: betas[..t_max].to_vec() },
        };
        let keep = t_max + 1;
        Ok(Self {
            spec,
            beta: self.beta[..keep].to_vec(),
            alpha: self.alpha[..keep].to_vec(),
            alpha_bar: self.alpha_bar[..keep].to_vec(),
            beta_bar: self.beta_bar[..keep].to_vec(),
            sigma: self.sigma[..keep].to_vec(),
        })
    }
}

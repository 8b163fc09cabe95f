//! The noise predictor `ε_θ(x_t, t)`: a small convolutional encoder–decoder.
//!
//! ```text
//! x ─conv_in─(+time)─SiLU─ h0 ───────────────────────────────(+)─conv_out─ ε
//!                          └pool─down1─SiLU─ h1 ────(+)─up1─SiLU─ h3 ─up┘
//!                                           └pool─down2─SiLU─ h2 ─up┘
//! ```
//!
//! All convolutions are 3×3 with zero padding. Feature widths are
//! `[c0, c1, c1, c0]` for `h0..h3` (the default is `[16, 32, 32, 16]`).
//! The timestep enters through a sinusoidal embedding mapped by one affine
//! layer to a per-channel offset added after `conv_in`.
//!
//! Derivatives are hand-written: [`DenoiserModel::input_vjp`] gives
//! `Jₓᵀ·w` and [`DenoiserModel::param_vjp`] gives `J_θᵀ·w`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{
    avg_pool2, avg_pool2_adjoint_add, silu, silu_derivative, upsample2_add, upsample2_adjoint, Conv3,
};
use super::NoisePredictor;
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub image_size: usize,
    /// Width of the full-resolution features (`h0`, `h3`).
    pub base_channels: usize,
    /// Width of the half- and quarter-resolution features (`h1`, `h2`).
    pub mid_channels: usize,
    pub time_embed_dim: usize,
}

impl Architecture {
    pub fn standard(image_size: usize) -> Self {
        Self { image_size, base_channels: 16, mid_channels: 32, time_embed_dim: 32 }
    }

    /// A few hundred parameters; used for finite-difference checks.
    pub fn tiny(image_size: usize) -> Self {
        Self { image_size, base_channels: 2, mid_channels: 3, time_embed_dim: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.image_size >= 4 && self.image_size.is_multiple_of(4),
            "denoiser image size must be a positive multiple of 4, got {}",
            self.image_size
        );
        ensure!(self.base_channels > 0 && self.mid_channels > 0, "channel widths must be positive");
        ensure!(
            self.time_embed_dim >= 2 && self.time_embed_dim.is_multiple_of(2),
            "time embedding dimension must be a positive even number"
        );
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Offsets of each layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    conv_in: Conv3,
    time_weight: usize,
    time_bias: usize,
    down1: Conv3,
    down2: Conv3,
    up1: Conv3,
    conv_out: Conv3,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let (c0, c1, e) = (arch.base_channels, arch.mid_channels, arch.time_embed_dim);
        let mut offset = 0;
        let mut conv = |cin: usize, cout: usize| {
            let layer = Conv3 { cin, cout, weight: offset, bias: offset + cout * cin * 9 };
            offset += Conv3::param_count(cin, cout);
            layer
        };
        let conv_in = conv(1, c0);
        let down1 = conv(c0, c1);
        let down2 = conv(c1, c1);
        let up1 = conv(c1, c0);
        let conv_out = conv(c0, 1);
        let time_weight = offset;
        let time_bias = time_weight + c0 * e;
        let total = time_bias + c0;
        Self { conv_in, time_weight, time_bias, down1, down2, up1, conv_out, total }
    }
}

/// Trained (or freshly initialized) noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Architecture,
    t_max: usize,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
struct Trace {
    embedding: Vec<f64>,
    x: Vec<f64>,
    a0: Vec<f64>,
    p1: Vec<f64>,
    a1: Vec<f64>,
    p2: Vec<f64>,
    a2: Vec<f64>,
    q1: Vec<f64>,
    a3: Vec<f64>,
    r: Vec<f64>,
}

impl DenoiserModel {
    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)` for every
    /// weight and bias, drawn from `seed`.
    pub fn initialize(arch: Architecture, t_max: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        ensure!(t_max >= 1, "model must cover at least one timestep");
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = rng::derived(seed, 0x1417);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-bound..bound);
            }
        };
        for conv in [layout.conv_in, layout.down1, layout.down2, layout.up1, layout.conv_out] {
            fill(conv.weight..conv.bias + conv.cout, conv.fan_in());
        }
        fill(layout.time_weight..layout.total, arch.time_embed_dim);
        Ok(Self { arch, t_max, params })
    }

    pub fn from_params(arch: Architecture, t_max: usize, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        ensure!(t_max >= 1, "model must cover at least one timestep");
        ensure!(
            params.len() == arch.param_count(),
            "architecture needs {} parameters, got {}",
            arch.param_count(),
            params.len()
        );
        ensure!(params.iter().all(|p| p.is_finite()), "parameters must be finite");
        Ok(Self { arch, t_max, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check(&self, x: &Image, t: usize) -> Result<()> {
        ensure!(
            x.size() == self.arch.image_size,
            "denoiser expects {0}x{0} input, got {1}x{1}",
            self.arch.image_size,
            x.size()
        );
        ensure!((1..=self.t_max).contains(&t), "timestep {t} outside 1..={}", self.t_max);
        Ok(())
    }

    /// `ε_θ(x_t, t)`
    pub fn apply(&self, x: &Image, t: usize) -> Result<Image> {
        self.check(x, t)?;
        let (_, out) = self.forward(x.data(), t);
        Ok(Image::from_vec_unchecked(x.size(), out))
    }

    /// `(∂ε_θ/∂x_t)ᵀ · cotangent`
    pub fn input_vjp(&self, x: &Image, t: usize, cotangent: &Image) -> Result<Image> {
        self.check(x, t)?;
        ensure!(cotangent.same_shape(x), "cotangent shape differs from input");
        let (trace, _) = self.forward(x.data(), t);
        let dx = self.backward(&trace, cotangent.data(), None, true).expect("input gradient requested");
        Ok(Image::from_vec_unchecked(x.size(), dx))
    }

    /// `(∂ε_θ/∂θ)ᵀ · cotangent` as a flat vector aligned with [`params`](Self::params).
    pub fn param_vjp(&self, x: &Image, t: usize, cotangent: &Image) -> Result<Vec<f64>> {
        self.check(x, t)?;
        ensure!(cotangent.same_shape(x), "cotangent shape differs from input");
        let mut grads = vec![0.0; self.params.len()];
        let (trace, _) = self.forward(x.data(), t);
        self.backward(&trace, cotangent.data(), Some(&mut grads), false);
        Ok(grads)
    }

    /// One training sample: evaluates `ε_θ(x_t, t)`, lets `cotangent_of`
    /// turn the prediction into `∂loss/∂ε_θ`, and adds `J_θᵀ` of it to
    /// `grads`. Returns the prediction.
    pub(crate) fn accumulate_param_grad(
        &self,
        x: &[f64],
        t: usize,
        grads: &mut [f64],
        cotangent_of: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Vec<f64> {
        let (trace, out) = self.forward(x, t);
        let cot = cotangent_of(&out);
        self.backward(&trace, &cot, Some(grads), false);
        out
    }

    fn embedding(&self, t: usize) -> Vec<f64> {
        let half = self.arch.time_embed_dim / 2;
        let mut emb = vec![0.0; 2 * half];
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let (s, c) = (t as f64 * freq).sin_cos();
            emb[k] = s;
            emb[half + k] = c;
        }
        emb
    }

    fn forward(&self, x: &[f64], t: usize) -> (Trace, Vec<f64>) {
        let l = Layout::new(&self.arch);
        let p = &self.params;
        let (c0, c1, e) = (self.arch.base_channels, self.arch.mid_channels, self.arch.time_embed_dim);
        let n0 = self.arch.image_size;
        let (n1, n2) = (n0 / 2, n0 / 4);
        let mut cols = Vec::new();

        let embedding = self.embedding(t);
        let mut a0 = Vec::new();
        l.conv_in.forward(p, x, n0, n0, &mut cols, &mut a0);
        for (ch, plane) in a0.chunks_mut(n0 * n0).enumerate() {
            let w = &p[l.time_weight + ch * e..][..e];
            let offset = p[l.time_bias + ch] + w.iter().zip(&embedding).map(|(a, b)| a * b).sum::<f64>();
            plane.iter_mut().for_each(|v| *v += offset);
        }
        let h0: Vec<f64> = a0.iter().map(|&v| silu(v)).collect();

        let p1 = avg_pool2(&h0, c0, n0, n0);
        let mut a1 = Vec::new();
        l.down1.forward(p, &p1, n1, n1, &mut cols, &mut a1);
        let h1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();

        let p2 = avg_pool2(&h1, c1, n1, n1);
        let mut a2 = Vec::new();
        l.down2.forward(p, &p2, n2, n2, &mut cols, &mut a2);
        let h2: Vec<f64> = a2.iter().map(|&v| silu(v)).collect();

        let mut q1 = h1.clone();
        upsample2_add(&h2, c1, n2, n2, &mut q1);
        let mut a3 = Vec::new();
        l.up1.forward(p, &q1, n1, n1, &mut cols, &mut a3);
        let h3: Vec<f64> = a3.iter().map(|&v| silu(v)).collect();

        let mut r = h0.clone();
        upsample2_add(&h3, c0, n1, n1, &mut r);
        let mut out = Vec::new();
        l.conv_out.forward(p, &r, n0, n0, &mut cols, &mut out);

        let trace = Trace { embedding, x: x.to_vec(), a0, p1, a1, p2, a2, q1, a3, r };
        (trace, out)
    }

    /// Reverse pass. Adds parameter gradients into `grads` when given and
    /// returns the input gradient when `want_input` is set.
    fn backward(
        &self,
        tr: &Trace,
        grad_out: &[f64],
        mut grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let l = Layout::new(&self.arch);
        let p = &self.params;
        let (c0, c1, e) = (self.arch.base_channels, self.arch.mid_channels, self.arch.time_embed_dim);
        let n0 = self.arch.image_size;
        let (n1, n2) = (n0 / 2, n0 / 4);
        let (mut cols, mut scratch) = (Vec::new(), Vec::new());

        let mut param_grad = |conv: &Conv3, input: &[f64], n: usize, g_out: &[f64], cols: &mut Vec<f64>| {
            if let Some(g) = grads.as_deref_mut() {
                super::kernels::im2col(input, conv.cin, n, n, cols);
                conv.accumulate_param_grad(g_out, cols, n * n, g);
            }
        };
        let silu_back = |g: &mut [f64], pre: &[f64]| {
            g.iter_mut().zip(pre).for_each(|(g, &a)| *g *= silu_derivative(a));
        };

        // conv_out
        param_grad(&l.conv_out, &tr.r, n0, grad_out, &mut cols);
        let mut d_r = Vec::new();
        l.conv_out.input_grad(p, grad_out, n0, n0, &mut scratch, &mut d_r);

        // r = h0 + up(h3)
        let mut d_h0 = d_r.clone();
        let mut d_a3 = upsample2_adjoint(&d_r, c0, n1, n1);
        silu_back(&mut d_a3, &tr.a3);
        param_grad(&l.up1, &tr.q1, n1, &d_a3, &mut cols);
        let mut d_q1 = Vec::new();
        l.up1.input_grad(p, &d_a3, n1, n1, &mut scratch, &mut d_q1);

        // q1 = h1 + up(h2)
        let mut d_h1 = d_q1.clone();
        let mut d_a2 = upsample2_adjoint(&d_q1, c1, n2, n2);
        silu_back(&mut d_a2, &tr.a2);
        param_grad(&l.down2, &tr.p2, n2, &d_a2, &mut cols);
        let mut d_p2 = Vec::new();
        l.down2.input_grad(p, &d_a2, n2, n2, &mut scratch, &mut d_p2);
        avg_pool2_adjoint_add(&d_p2, c1, n1, n1, &mut d_h1);

        let mut d_a1 = d_h1;
        silu_back(&mut d_a1, &tr.a1);
        param_grad(&l.down1, &tr.p1, n1, &d_a1, &mut cols);
        let mut d_p1 = Vec::new();
        l.down1.input_grad(p, &d_a1, n1, n1, &mut scratch, &mut d_p1);
        avg_pool2_adjoint_add(&d_p1, c0, n0, n0, &mut d_h0);

        let mut d_a0 = d_h0;
        silu_back(&mut d_a0, &tr.a0);
        param_grad(&l.conv_in, &tr.x, n0, &d_a0, &mut cols);
        if let Some(g) = grads {
            for (ch, plane) in d_a0.chunks(n0 * n0).enumerate() {
                let d_offset: f64 = plane.iter().sum();
                g[l.time_bias + ch] += d_offset;
                let w = &mut g[l.time_weight + ch * e..][..e];
                w.iter_mut().zip(&tr.embedding).for_each(|(w, emb)| *w += d_offset * emb);
            }
        }

        want_input.then(|| {
            let mut d_x = Vec::new();
            l.conv_in.input_grad(p, &d_a0, n0, n0, &mut scratch, &mut d_x);
            d_x
        })
    }
}

impl NoisePredictor for DenoiserModel {
    fn image_size(&self) -> Option<usize> {
        Some(self.arch.image_size)
    }

    fn t_max(&self) -> usize {
        self.t_max
    }

    fn predict(&self, x: &Image, t: usize) -> Result<Image> {
        self.apply(x, t)
    }

    fn input_vjp(&self, x: &Image, t: usize, cotangent: &Image) -> Result<Image> {
        DenoiserModel::input_vjp(self, x, t, cotangent)
    }
}

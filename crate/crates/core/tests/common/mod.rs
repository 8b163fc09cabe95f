//! Oracles shared by the integration tests.
#![allow(dead_code)]

use latent_ct::{FanBeamGeometry, Image, Sinogram};
use rand::Rng;

pub fn small(n: usize, views: usize, dets: usize) -> FanBeamGeometry {
    FanBeamGeometry {
        source_to_center_mm: 40.0,
        source_to_detector_mm: 70.0,
        n_detectors: dets,
        detector_spacing_mm: 2.4,
        n_views: views,
        image_size_px: n,
        pixel_spacing_mm: 24.0 / n as f64,
        view_subsample_stride: 1,
    }
}

/// Ray endpoints written out from the geometry conventions, without the
/// library's helpers.
pub fn oracle_ray(g: &FanBeamGeometry, v: usize, k: usize) -> ([f64; 2], [f64; 2]) {
    let theta = std::f64::consts::TAU * (v * g.view_subsample_stride) as f64 / g.n_views as f64;
    let src = [-g.source_to_center_mm * theta.sin(), g.source_to_center_mm * theta.cos()];
    let fan = (k as f64 - (g.n_detectors - 1) as f64 / 2.0) * g.detector_spacing_mm / g.source_to_detector_mm;
    // central ray points along −src; rotate it counterclockwise by the fan angle
    let phi = theta - std::f64::consts::FRAC_PI_2 + fan;
    let dst = [
        src[0] + g.source_to_detector_mm * phi.cos(),
        src[1] + g.source_to_detector_mm * phi.sin(),
    ];
    (src, dst)
}

/// Length of segment `src → dst` inside an axis-aligned box (Liang–Barsky).
pub fn clipped_length(src: [f64; 2], dst: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let d = [dst[0] - src[0], dst[1] - src[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        if d[axis] == 0.0 {
            if src[axis] < lo[axis] || src[axis] > hi[axis] {
                return 0.0;
            }
            continue;
        }
        let a = (lo[axis] - src[axis]) / d[axis];
        let b = (hi[axis] - src[axis]) / d[axis];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t1 > t0 {
        (t1 - t0) * d[0].hypot(d[1])
    } else {
        0.0
    }
}

/// Dense system matrix, rows = rays (view-major), columns = pixels.
pub fn dense_oracle(g: &FanBeamGeometry) -> Vec<Vec<f64>> {
    let n = g.image_size_px;
    let d = g.pixel_spacing_mm;
    let half = n as f64 * d / 2.0;
    let (views, dets) = g.sinogram_shape();
    let mut rows = Vec::new();
    for v in 0..views {
        for k in 0..dets {
            let (src, dst) = oracle_ray(g, v, k);
            let mut row = vec![0.0; n * n];
            for r in 0..n {
                for c in 0..n {
                    let lo = [-half + c as f64 * d, half - (r + 1) as f64 * d];
                    let hi = [-half + (c + 1) as f64 * d, half - r as f64 * d];
                    row[r * n + c] = clipped_length(src, dst, lo, hi);
                }
            }
            rows.push(row);
        }
    }
    rows
}

pub fn random_image(rng: &mut impl Rng, n: usize) -> Image {
    Image::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_sinogram(rng: &mut impl Rng, views: usize, dets: usize) -> Sinogram {
    Sinogram::new(views, dets, (0..views * dets).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}


/// Dense product `A x` from the oracle matrix.
pub fn dense_apply(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Central finite difference of `f` along `dir` at `x`.
pub fn directional_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
    (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// A denoiser whose parameters are moved away from the initialization, so
/// biases and time weights are not tiny.
pub fn perturbed_model(arch: latent_ct::diffusion::Architecture, t_max: usize, seed: u64) -> latent_ct::diffusion::DenoiserModel {
    use latent_ct::diffusion::DenoiserModel;
    use rand::SeedableRng;
    let base = DenoiserModel::initialize(arch, t_max, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let params = base.params().iter().map(|p| p + 0.05 * rng.random_range(-1.0..1.0)).collect();
    DenoiserModel::from_params(arch, t_max, params).unwrap()
}

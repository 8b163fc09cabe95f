//! Full-reference image quality metrics and order statistics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Image;

/// Data range of images normalized to `[−1, 1]`.
pub const NORMALIZED_RANGE: f64 = 2.0;

/// `10·log10(range²/MSE)`; `+∞` for identical images.
pub fn psnr(reference: &Image, test: &Image, data_range: f64) -> Result<f64> {
    ensure!(reference.same_shape(test), "PSNR needs images of equal size");
    ensure!(data_range > 0.0 && data_range.is_finite(), "data range must be positive");
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: NORMALIZED_RANGE }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - half).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Mean local SSIM over every window position that fits inside the image.
pub fn ssim(reference: &Image, test: &Image, params: &SsimParams) -> Result<f64> {
    ensure!(reference.same_shape(test), "SSIM needs images of equal size");
    ensure!(params.window >= 1, "SSIM window must be nonempty");
    ensure!(params.sigma > 0.0 && params.data_range > 0.0, "SSIM sigma and data range must be positive");
    let n = reference.size();
    ensure!(
        params.window <= n,
        "SSIM window {} is larger than the {n}x{n} image",
        params.window
    );

    let taps = params.taps();
    let x = reference.data();
    let y = test.data();
    let filter = |f: &dyn Fn(usize) -> f64| valid_filter(n, &taps, f);
    let mu_x = filter(&|i| x[i]);
    let mu_y = filter(&|i| y[i]);
    let xx = filter(&|i| x[i] * x[i]);
    let yy = filter(&|i| y[i] * y[i]);
    let xy = filter(&|i| x[i] * y[i]);

    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// Separable correlation restricted to the valid region; output is
/// `(n − w + 1)²`, row-major.
fn valid_filter(n: usize, taps: &[f64], value: &dyn Fn(usize) -> f64) -> Vec<f64> {
    let w = taps.len();
    let m = n - w + 1;
    let mut rows = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            rows[r * m + c] = taps.iter().enumerate().map(|(k, t)| t * value(r * n + c + k)).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = taps.iter().enumerate().map(|(k, t)| t * rows[(r + k) * m + c]).sum();
        }
    }
    out
}

/// Scores of one reconstruction against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    /// `+∞` when the images are identical; serialized as `"inf"`.
    #[serde(with = "psnr_value")]
    pub psnr_db: f64,
}

impl MetricReport {
    pub fn evaluate(reference: &Image, test: &Image) -> Result<Self> {
        Ok(Self {
            ssim: ssim(reference, test, &SsimParams::default())?,
            psnr_db: psnr(reference, test, NORMALIZED_RANGE)?,
        })
    }

    pub fn psnr_is_infinite(&self) -> bool {
        self.psnr_db == f64::INFINITY
    }
}

mod psnr_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *value == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*value)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
        }
    }
}

/// Order statistics of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub q1: f64,
    /// Mean of the two middle values for even counts.
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Stats {
    /// Quartiles interpolate linearly between order statistics.
    pub fn of(values: &[f64]) -> Result<Self> {
        ensure!(!values.is_empty(), "cannot summarize an empty collection");
        ensure!(values.iter().all(|v| !v.is_nan()), "cannot summarize NaN values");
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (a, b) = (sorted[lo], sorted[(lo + 1).min(sorted.len() - 1)]);
    if frac == 0.0 || a == b {
        a
    } else {
        a + (b - a) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub ssim: Stats,
    pub psnr_db: Stats,
}

pub fn summarize(reports: &[MetricReport]) -> Result<MetricSummary> {
    let ssim: Vec<f64> = reports.iter().map(|r| r.ssim).collect();
    let psnr: Vec<f64> = reports.iter().map(|r| r.psnr_db).collect();
    Ok(MetricSummary { ssim: Stats::of(&ssim)?, psnr_db: Stats::of(&psnr)? })
}

/// Median with the mean-of-middle convention.
pub fn median(values: &[f64]) -> Result<f64> {
    Ok(Stats::of(values)?.median)
}

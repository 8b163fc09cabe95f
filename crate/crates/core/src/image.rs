//! Dense 2D fields: square images and fan-beam sinograms.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// A square, row-major scalar field in normalized intensity units.
///
/// The same type carries images, latents, gradients and noise fields; they
/// all live in image space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(size > 0, "image size must be positive");
        ensure!(
            data.len() == size * size,
            "image of side {size} needs {} values, got {}",
            size * size,
            data.len()
        );
        ensure!(data.iter().all(|v| v.is_finite()), "image contains non-finite values");
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self::filled(size, 0.0)
    }

    pub fn filled(size: usize, value: f64) -> Self {
        assert!(size > 0, "image size must be positive");
        Self { size, data: vec![value; size * size] }
    }

    /// Builds an image from a function of `(row, col)`.
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(size > 0, "image size must be positive");
        let mut data = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                data.push(f(r, c));
            }
        }
        Self { size, data }
    }

    pub(crate) fn from_vec_unchecked(size: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), size * size);
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.size + col] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.size == other.size
    }

    pub fn dot(&self, other: &Image) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn scaled(&self, factor: f64) -> Image {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { size: self.size, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Image) {
        assert_eq!(self.size, other.size, "image size mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.size, other.size, "image size mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Fan-beam projection data, view-major: `data[view * n_detectors + det]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    n_views: usize,
    n_detectors: usize,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_views: usize, n_detectors: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(n_views > 0 && n_detectors > 0, "sinogram dimensions must be positive");
        ensure!(
            data.len() == n_views * n_detectors,
            "sinogram {n_views}x{n_detectors} needs {} values, got {}",
            n_views * n_detectors,
            data.len()
        );
        ensure!(data.iter().all(|v| v.is_finite()), "sinogram contains non-finite values");
        Ok(Self { n_views, n_detectors, data })
    }

    pub fn zeros(n_views: usize, n_detectors: usize) -> Self {
        assert!(n_views > 0 && n_detectors > 0, "sinogram dimensions must be positive");
        Self { n_views, n_detectors, data: vec![0.0; n_views * n_detectors] }
    }

    pub(crate) fn from_vec_unchecked(n_views: usize, n_detectors: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n_views * n_detectors);
        Self { n_views, n_detectors, data }
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn view(&self, v: usize) -> &[f64] {
        &self.data[v * self.n_detectors..(v + 1) * self.n_detectors]
    }

    pub fn same_shape(&self, other: &Sinogram) -> bool {
        self.n_views == other.n_views && self.n_detectors == other.n_detectors
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &Sinogram) -> Sinogram {
        assert!(self.same_shape(other), "sinogram shape mismatch");
        Sinogram {
            n_views: self.n_views,
            n_detectors: self.n_detectors,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Sinogram {
        Sinogram {
            n_views: self.n_views,
            n_detectors: self.n_detectors,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

//! Fan-beam acquisition geometry and the linear system operator.
//!
//! The forward operator `A` is ray driven: one ray per detector element runs
//! from the source to the element's position on the arc detector, and its
//! value is the sum of pixel values weighted by the exact intersection
//! length of the ray with each pixel (Siddon traversal). The backprojector
//! reuses the identical weights, so it is the exact adjoint `Aᵀ`.
//!
//! Conventions:
//!
//! * The image is centred on the rotation axis. Column `j` spans
//!   `x ∈ [-H + j·d, -H + (j+1)·d]`, row `i` spans
//!   `y ∈ [H - (i+1)·d, H - i·d]`, with `H = N·d/2`.
//! * View `v` places the source at angle `2π·v / n_views`, measured
//!   counterclockwise from the `+y` axis.
//! * Detector elements sit at equal angular increments
//!   `detector_spacing / source_to_detector` on an arc centred on the
//!   source, symmetric about the source–isocentre axis.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::{Image, Sinogram};

/// Number of consecutive views accumulated into one partial image during
/// backprojection. Partial images are merged in view order, so the result
/// does not depend on how rayon schedules the chunks.
const BACKPROJECT_VIEW_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    pub source_to_center_mm: f64,
    pub source_to_detector_mm: f64,
    pub n_detectors: usize,
    pub detector_spacing_mm: f64,
    /// Samples per full gantry rotation, before subsampling.
    pub n_views: usize,
    pub image_size_px: usize,
    pub pixel_spacing_mm: f64,
    /// `1` is a full scan; `k` keeps every k-th view.
    pub view_subsample_stride: usize,
}

impl FanBeamGeometry {
    /// The clinical-scale scanner: 256² image at 2.148 mm, 115.0 cm
    /// source-to-centre, 177.2 cm source-to-detector, 528 elements at
    /// 1.25 mm and 800 views per rotation.
    pub fn clinical() -> Self {
        Self {
            source_to_center_mm: 1150.0,
            source_to_detector_mm: 1772.0,
            n_detectors: 528,
            detector_spacing_mm: 1.25,
            n_views: 800,
            image_size_px: 256,
            pixel_spacing_mm: 2.148,
            view_subsample_stride: 1,
        }
    }

    /// A desk-scale variant of [`clinical`](Self::clinical): same source and
    /// detector distances and a 550 mm field of view, sampled on
    /// `image_size_px²` pixels with 360 views and 128 detector elements whose
    /// fan covers the whole inscribed image disk.
    pub fn desk(image_size_px: usize) -> Self {
        Self {
            source_to_center_mm: 1150.0,
            source_to_detector_mm: 1772.0,
            n_detectors: 128,
            detector_spacing_mm: 7.0,
            n_views: 360,
            image_size_px,
            pixel_spacing_mm: 550.0 / image_size_px as f64,
            view_subsample_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_detectors > 0, "n_detectors must be positive");
        ensure!(self.n_views > 0, "n_views must be positive");
        ensure!(self.image_size_px > 0, "image_size_px must be positive");
        ensure!(self.view_subsample_stride > 0, "view_subsample_stride must be at least 1");
        ensure!(
            self.detector_spacing_mm > 0.0 && self.detector_spacing_mm.is_finite(),
            "detector_spacing_mm must be positive"
        );
        ensure!(
            self.pixel_spacing_mm > 0.0 && self.pixel_spacing_mm.is_finite(),
            "pixel_spacing_mm must be positive"
        );
        let half_width = self.image_size_px as f64 * self.pixel_spacing_mm / 2.0;
        ensure!(
            self.source_to_center_mm > half_width,
            "source_to_center_mm ({}) must exceed the image half-width ({half_width})",
            self.source_to_center_mm
        );
        ensure!(
            self.source_to_detector_mm > self.source_to_center_mm
                && self.source_to_detector_mm.is_finite(),
            "source_to_detector_mm must exceed source_to_center_mm"
        );
        Ok(())
    }

    /// Copy of this geometry keeping every `stride`-th view.
    pub fn with_stride(&self, stride: usize) -> Self {
        Self { view_subsample_stride: stride, ..*self }
    }

    /// `ceil(n_views / view_subsample_stride)`
    pub fn effective_views(&self) -> usize {
        self.n_views.div_ceil(self.view_subsample_stride)
    }

    pub fn sinogram_shape(&self) -> (usize, usize) {
        (self.effective_views(), self.n_detectors)
    }

    /// Source angle (radians, counterclockwise from `+y`) of the `index`-th
    /// retained view.
    pub fn view_angle(&self, index: usize) -> f64 {
        2.0 * PI * (index * self.view_subsample_stride) as f64 / self.n_views as f64
    }

    /// Fan angle of detector element `k` relative to the central ray.
    pub fn detector_angle(&self, k: usize) -> f64 {
        let step = self.detector_spacing_mm / self.source_to_detector_mm;
        (k as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * step
    }

    /// Source position and detector-element position of one ray, in mm.
    pub fn ray_endpoints(&self, view_index: usize, k: usize) -> ([f64; 2], [f64; 2]) {
        let theta = self.view_angle(view_index);
        let (sin_t, cos_t) = theta.sin_cos();
        let r = self.source_to_center_mm;
        let src = [-r * sin_t, r * cos_t];
        // central direction points from the source through the isocentre
        let (cx, cy) = (sin_t, -cos_t);
        let (sin_g, cos_g) = self.detector_angle(k).sin_cos();
        let dir = [cx * cos_g - cy * sin_g, cx * sin_g + cy * cos_g];
        let d = self.source_to_detector_mm;
        (src, [src[0] + d * dir[0], src[1] + d * dir[1]])
    }

    /// Intersection weights `(pixel index, length in mm)` of one ray.
    pub fn ray_weights(&self, view_index: usize, k: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let (src, dst) = self.ray_endpoints(view_index, k);
        RayTracer::default().trace(self, src, dst, |p, w| out.push((p, w)));
        out
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        ensure!(
            image.size() == self.image_size_px,
            "image is {0}x{0} but the geometry expects {1}x{1}",
            image.size(),
            self.image_size_px
        );
        Ok(())
    }

    fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        let (views, dets) = self.sinogram_shape();
        ensure!(
            sino.n_views() == views && sino.n_detectors() == dets,
            "sinogram is {}x{} but the geometry expects {views}x{dets}",
            sino.n_views(),
            sino.n_detectors()
        );
        Ok(())
    }
}

/// Forward projection `A x`.
pub fn project(geom: &FanBeamGeometry, image: &Image) -> Result<Sinogram> {
    geom.validate()?;
    geom.check_image(image)?;
    Ok(project_with(geom, image, ray_table(geom).as_deref()))
}

fn project_with(geom: &FanBeamGeometry, image: &Image, table: Option<&RayTable>) -> Sinogram {
    let (views, dets) = geom.sinogram_shape();
    let pixels = image.data();
    let mut data = vec![0.0; views * dets];
    if let Some(table) = table {
        data.par_chunks_mut(dets).enumerate().for_each(|(v, row)| {
            for (k, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                table.visit(v * dets + k, |p, w| acc += w * pixels[p]);
                *out = acc;
            }
        });
    } else {
        data.par_chunks_mut(dets).enumerate().for_each_init(RayTracer::default, |tracer, (v, row)| {
            for (k, out) in row.iter_mut().enumerate() {
                let (src, dst) = geom.ray_endpoints(v, k);
                let mut acc = 0.0;
                tracer.trace(geom, src, dst, |p, w| acc += w * pixels[p]);
                *out = acc;
            }
        });
    }
    Sinogram::from_vec_unchecked(views, dets, data)
}

/// Backprojection `Aᵀ s` with exactly the weights used by [`project`].
pub fn backproject(geom: &FanBeamGeometry, sino: &Sinogram) -> Result<Image> {
    geom.validate()?;
    geom.check_sinogram(sino)?;
    Ok(backproject_with(geom, sino, ray_table(geom).as_deref()))
}

fn backproject_with(geom: &FanBeamGeometry, sino: &Sinogram, table: Option<&RayTable>) -> Image {
    let n = geom.image_size_px;
    let (views, dets) = geom.sinogram_shape();
    let chunks: Vec<Vec<f64>> = (0..views.div_ceil(BACKPROJECT_VIEW_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut partial = vec![0.0; n * n];
            let mut tracer = RayTracer::default();
            let start = chunk * BACKPROJECT_VIEW_CHUNK;
            for v in start..(start + BACKPROJECT_VIEW_CHUNK).min(views) {
                for (k, &s) in sino.view(v).iter().enumerate() {
                    if s == 0.0 {
                        continue;
                    }
                    let visit = |p: usize, w: f64| partial[p] += w * s;
                    match table {
                        Some(table) => table.visit(v * dets + k, visit),
                        None => {
                            let (src, dst) = geom.ray_endpoints(v, k);
                            tracer.trace(geom, src, dst, visit);
                        }
                    }
                }
            }
            partial
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for partial in &chunks {
        for (o, p) in out.iter_mut().zip(partial) {
            *o += p;
        }
    }
    Image::from_vec_unchecked(n, out)
}

/// Keeps views whose index is a multiple of `stride`.
pub fn subsample_views(sino: &Sinogram, stride: usize) -> Result<Sinogram> {
    ensure!(stride >= 1, "view stride must be at least 1, got {stride}");
    let dets = sino.n_detectors();
    let kept: Vec<f64> = (0..sino.n_views())
        .step_by(stride)
        .flat_map(|v| sino.view(v).iter().copied())
        .collect();
    Ok(Sinogram::from_vec_unchecked(kept.len() / dets, dets, kept))
}

/// Traced ray weights of one geometry in compressed-row form, rows in
/// sinogram order. Visiting a row replays the traversal order exactly, so
/// cached and traced evaluation give bit-identical results.
struct RayTable {
    offsets: Vec<usize>,
    pixels: Vec<u32>,
    weights: Vec<f64>,
}

impl RayTable {
    fn build(geom: &FanBeamGeometry) -> Self {
        let (views, dets) = geom.sinogram_shape();
        let per_view: Vec<(Vec<usize>, Vec<u32>, Vec<f64>)> = (0..views)
            .into_par_iter()
            .map_init(RayTracer::default, |tracer, v| {
                let (mut lens, mut pixels, mut weights) = (Vec::with_capacity(dets), Vec::new(), Vec::new());
                for k in 0..dets {
                    let (src, dst) = geom.ray_endpoints(v, k);
                    let before = pixels.len();
                    tracer.trace(geom, src, dst, |p, w| {
                        pixels.push(p as u32);
                        weights.push(w);
                    });
                    lens.push(pixels.len() - before);
                }
                (lens, pixels, weights)
            })
            .collect();
        let mut table = RayTable { offsets: vec![0], pixels: Vec::new(), weights: Vec::new() };
        for (lens, pixels, weights) in per_view {
            for len in lens {
                table.offsets.push(table.offsets.last().unwrap() + len);
            }
            table.pixels.extend(pixels);
            table.weights.extend(weights);
        }
        table
    }

    fn visit(&self, ray: usize, mut f: impl FnMut(usize, f64)) {
        let range = self.offsets[ray]..self.offsets[ray + 1];
        for (&p, &w) in self.pixels[range.clone()].iter().zip(&self.weights[range]) {
            f(p as usize, w);
        }
    }
}

/// Geometries whose estimated weight count exceeds this are traced on the
/// fly instead of cached.
const RAY_TABLE_MAX_WEIGHTS: usize = 24_000_000;
const RAY_TABLE_CACHE_SLOTS: usize = 6;

static RAY_TABLES: Mutex<Vec<(FanBeamGeometry, Arc<RayTable>)>> = Mutex::new(Vec::new());

/// Cached weights for `geom`, built on first use; least recently used
/// entries are evicted.
fn ray_table(geom: &FanBeamGeometry) -> Option<Arc<RayTable>> {
    let (views, dets) = geom.sinogram_shape();
    let estimate = views * dets * 2 * geom.image_size_px;
    if estimate > RAY_TABLE_MAX_WEIGHTS || geom.image_size_px * geom.image_size_px > u32::MAX as usize {
        return None;
    }
    {
        let mut cache = RAY_TABLES.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(pos) = cache.iter().position(|(g, _)| g == geom) {
            let entry = cache.remove(pos);
            let table = Arc::clone(&entry.1);
            cache.push(entry);
            return Some(table);
        }
    }
    let table = Arc::new(RayTable::build(geom));
    let mut cache = RAY_TABLES.lock().unwrap_or_else(|e| e.into_inner());
    if cache.len() >= RAY_TABLE_CACHE_SLOTS {
        cache.remove(0);
    }
    cache.push((*geom, Arc::clone(&table)));
    Some(table)
}

/// Scratch buffers for one Siddon traversal; reused across rays.
#[derive(Default)]
struct RayTracer {
    alpha_x: Vec<f64>,
    alpha_y: Vec<f64>,
    merged: Vec<f64>,
}

impl RayTracer {
    /// Calls `visit(pixel, length)` for every pixel the segment `src → dst`
    /// crosses with positive length.
    fn trace(
        &mut self,
        geom: &FanBeamGeometry,
        src: [f64; 2],
        dst: [f64; 2],
        mut visit: impl FnMut(usize, f64),
    ) {
        let n = geom.image_size_px;
        let d = geom.pixel_spacing_mm;
        let half = n as f64 * d / 2.0;
        let dx = dst[0] - src[0];
        let dy = dst[1] - src[1];

        let Some((x_lo, x_hi)) = axis_range(src[0], dx, half) else { return };
        let Some((y_lo, y_hi)) = axis_range(src[1], dy, half) else { return };
        let a_min = x_lo.max(y_lo).max(0.0);
        let a_max = x_hi.min(y_hi).min(1.0);
        if a_max <= a_min {
            return;
        }

        plane_crossings(src[0], dx, half, d, n, a_min, a_max, &mut self.alpha_x);
        plane_crossings(src[1], dy, half, d, n, a_min, a_max, &mut self.alpha_y);

        self.merged.clear();
        self.merged.push(a_min);
        let (mut i, mut j) = (0, 0);
        while i < self.alpha_x.len() || j < self.alpha_y.len() {
            let next = if j >= self.alpha_y.len()
                || (i < self.alpha_x.len() && self.alpha_x[i] <= self.alpha_y[j])
            {
                i += 1;
                self.alpha_x[i - 1]
            } else {
                j += 1;
                self.alpha_y[j - 1]
            };
            self.merged.push(next);
        }
        self.merged.push(a_max);

        let length = dx.hypot(dy);
        let last = (n - 1) as f64;
        for pair in self.merged.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b <= a {
                continue;
            }
            let mid = 0.5 * (a + b);
            let col = ((src[0] + mid * dx + half) / d).floor().clamp(0.0, last) as usize;
            let row = ((half - (src[1] + mid * dy)) / d).floor().clamp(0.0, last) as usize;
            visit(row * n + col, (b - a) * length);
        }
    }
}

/// Parametric interval over which the ray lies between the two outer grid
/// planes of one axis, or `None` when a ray parallel to that axis misses the
/// grid.
fn axis_range(start: f64, delta: f64, half: f64) -> Option<(f64, f64)> {
    if delta == 0.0 {
        if start <= -half || start >= half {
            None
        } else {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        }
    } else {
        let a0 = (-half - start) / delta;
        let a1 = (half - start) / delta;
        Some((a0.min(a1), a0.max(a1)))
    }
}

/// Parameters of interior plane crossings strictly inside `(a_min, a_max)`,
/// in increasing order.
#[allow(clippy::too_many_arguments)]
fn plane_crossings(
    start: f64,
    delta: f64,
    half: f64,
    spacing: f64,
    n: usize,
    a_min: f64,
    a_max: f64,
    out: &mut Vec<f64>,
) {
    out.clear();
    if delta == 0.0 {
        return;
    }
    let alpha = |k: usize| (-half + k as f64 * spacing - start) / delta;
    let mut push = |a: f64| {
        if a > a_min && a < a_max {
            out.push(a);
        }
    };
    if delta > 0.0 {
        (0..=n).for_each(|k| push(alpha(k)));
    } else {
        (0..=n).rev().for_each(|k| push(alpha(k)));
    }
}

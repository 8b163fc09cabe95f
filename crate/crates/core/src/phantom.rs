//! Synthetic ellipse phantoms in normalized intensity units.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses { n: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size_px: usize,
    /// Output values for unit density 0 and 1.
    #[serde(default = "default_range")]
    pub intensity_range: (f64, f64),
}

fn default_range() -> (f64, f64) {
    (-1.0, 1.0)
}

impl PhantomSpec {
    pub fn shepp_logan(size_px: usize) -> Self {
        Self { kind: PhantomKind::SheppLogan, size_px, intensity_range: default_range() }
    }

    pub fn random_ellipses(size_px: usize, n: usize, seed: u64) -> Self {
        Self { kind: PhantomKind::RandomEllipses { n, seed }, size_px, intensity_range: default_range() }
    }
}

/// One additive ellipse in the unit square `[−1, 1]²`, `y` pointing up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Counterclockwise rotation in degrees.
    pub angle_deg: f64,
}

impl Ellipse {
    const fn new(intensity: f64, semi_x: f64, semi_y: f64, center_x: f64, center_y: f64, angle_deg: f64) -> Self {
        Self { intensity, semi_x, semi_y, center_x, center_y, angle_deg }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

/// The modified (higher-contrast) Shepp–Logan table.
pub const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse::new(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    Ellipse::new(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    Ellipse::new(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    Ellipse::new(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    Ellipse::new(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    Ellipse::new(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    Ellipse::new(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    Ellipse::new(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    Ellipse::new(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    Ellipse::new(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// A body ellipse with `n` smaller features inside it.
pub fn random_ellipse_table(n: usize, seed: u64) -> Vec<Ellipse> {
    let mut rng = rng::derived(seed, 0xe11);
    let body_x = rng.random_range(0.6..0.75);
    let body_y = rng.random_range(0.7..0.85);
    let mut table = vec![Ellipse::new(
        rng.random_range(0.45..0.6),
        body_x,
        body_y,
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-10.0..10.0),
    )];
    for _ in 0..n {
        let radius = 0.45 * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let sign = if rng.random_bool(0.6) { 1.0 } else { -1.0 };
        table.push(Ellipse::new(
            sign * rng.random_range(0.1..0.4),
            rng.random_range(0.03..0.15),
            rng.random_range(0.03..0.15),
            table[0].center_x + radius * theta.cos() * body_x / 0.75,
            table[0].center_y + radius * theta.sin() * body_y / 0.85,
            rng.random_range(0.0..180.0),
        ));
    }
    table
}

/// Unit-density value at a point: the sum of every ellipse containing it.
pub fn table_value(table: &[Ellipse], x: f64, y: f64) -> f64 {
    table.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum()
}

/// Samples the phantom at pixel centres, maps it onto the intensity range
/// and clamps to `[−1, 1]`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Image> {
    let (lo, hi) = spec.intensity_range;
    ensure!(spec.size_px > 0, "phantom size must be positive");
    ensure!(lo.is_finite() && hi.is_finite(), "intensity range must be finite");
    let table = match spec.kind {
        PhantomKind::SheppLogan => SHEPP_LOGAN.to_vec(),
        PhantomKind::RandomEllipses { n, seed } => random_ellipse_table(n, seed),
    };
    let n = spec.size_px as f64;
    Ok(Image::from_fn(spec.size_px, |r, c| {
        let x = (2.0 * c as f64 + 1.0) / n - 1.0;
        let y = 1.0 - (2.0 * r as f64 + 1.0) / n;
        (lo + table_value(&table, x, y) * (hi - lo)).clamp(-1.0, 1.0)
    }))
}

/// The seeded random-ellipse suite `seeds.start..seeds.end`.
pub fn phantom_suite(size_px: usize, n_ellipses: usize, seeds: std::ops::Range<u64>) -> Result<Vec<Image>> {
    seeds
        .map(|seed| generate_phantom(&PhantomSpec::random_ellipses(size_px, n_ellipses, seed)))
        .collect()
}

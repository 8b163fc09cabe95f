//! Seeded randomness. Every stochastic path in the crate draws from a
//! [`ChaCha8Rng`] built here, so results are a pure function of the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::image::Image;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label, so that e.g.
/// initialization noise and reverse-process noise never share draws.
pub fn derived(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal_image(rng: &mut impl Rng, size: usize) -> Image {
    let data = (0..size * size).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Image::from_vec_unchecked(size, data)
}

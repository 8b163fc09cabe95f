use latent_ct::metrics::*;
use latent_ct::phantom::*;
use latent_ct::Image;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

mod common;
use common::*;

/// SSIM with an explicit 2D Gaussian window at every valid position.
fn ssim_oracle(x: &Image, y: &Image) -> f64 {
    let (w, sigma) = (11usize, 1.5f64);
    let half = (w / 2) as f64;
    let mut kernel = vec![0.0; w * w];
    for i in 0..w {
        for j in 0..w {
            let (a, b) = (i as f64 - half, j as f64 - half);
            kernel[i * w + j] = (-(a * a + b * b) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
    let n = x.size();
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..=n - w {
        for c in 0..=n - w {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..w {
                for j in 0..w {
                    let k = kernel[i * w + j];
                    let (a, b) = (x.get(r + i, c + j), y.get(r + i, c + j));
                    mx += k * a;
                    my += k * b;
                    xx += k * a * a;
                    yy += k * b * b;
                    xy += k * a * b;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_windowed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = generate_phantom(&PhantomSpec::shepp_logan(32)).unwrap();
    let mut y = x.clone();
    y.add_scaled(0.1, &random_image(&mut rng, 32));
    let got = ssim(&x, &y, &SsimParams::default()).unwrap();
    assert!((got - ssim_oracle(&x, &y)).abs() <= 1e-10);
}

#[test]
fn ssim_basic_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_image(&mut rng, 24);
    let y = random_image(&mut rng, 24);
    let p = SsimParams::default();
    assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
    assert!((ssim(&x, &y, &p).unwrap() - ssim(&y, &x, &p).unwrap()).abs() < 1e-12);
    // anticorrelated structure with near-zero local means
    let board = Image::from_fn(24, |r, c| if (r + c) % 2 == 0 { 0.5 } else { -0.5 });
    assert!(ssim(&board, &board.scaled(-1.0), &p).unwrap() < 0.0);
    assert!(ssim(&Image::zeros(8), &Image::zeros(8), &p).is_err());
    assert!(ssim(&x, &Image::zeros(20), &p).is_err());
}

#[test]
fn psnr_of_known_noise_level() {
    let x = generate_phantom(&PhantomSpec::shepp_logan(256)).unwrap();
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = Image::new(256, x.data().iter().map(|v| v + noise.sample(&mut rng)).collect()).unwrap();
    // 10·log10(2² / 0.02²) = 40 dB
    let db = psnr(&x, &y, NORMALIZED_RANGE).unwrap();
    assert!((db - 40.0).abs() <= 0.2, "{db}");
    assert_eq!(psnr(&x, &x, NORMALIZED_RANGE).unwrap(), f64::INFINITY);
    let report = MetricReport::evaluate(&x, &x).unwrap();
    assert!(report.psnr_is_infinite());
    assert!((report.ssim - 1.0).abs() < 1e-12);
}

#[test]
fn shepp_logan_values_are_subset_sums_of_the_table() {
    let image = generate_phantom(&PhantomSpec::shepp_logan(128)).unwrap();
    let sums: Vec<f64> = (0u32..1 << SHEPP_LOGAN.len())
        .map(|mask| {
            let v: f64 = (0..SHEPP_LOGAN.len()).filter(|i| mask >> i & 1 == 1).map(|i| SHEPP_LOGAN[i].intensity).sum();
            (-1.0 + 2.0 * v).clamp(-1.0, 1.0)
        })
        .collect();
    for &p in image.data() {
        assert!(sums.iter().any(|s| (s - p).abs() < 1e-12), "{p} is not a table sum");
    }
    let (lo, hi) = image.min_max();
    assert_eq!(lo, -1.0);
    assert!(hi <= 1.0);
}

#[test]
fn phantom_specs_round_trip_through_json() {
    for spec in [PhantomSpec::shepp_logan(64), PhantomSpec::random_ellipses(32, 5, 77)] {
        let text = serde_json::to_string(&spec).unwrap();
        let back: PhantomSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(generate_phantom(&back).unwrap(), generate_phantom(&spec).unwrap());
    }
}

#[test]
fn summary_uses_interpolated_quartiles() {
    let s = Stats::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 1.75, 2.5, 3.25, 4.0));
    assert_eq!(median(&[5.0, 1.0, 3.0]).unwrap(), 3.0);
    assert!(Stats::of(&[]).is_err());
    assert!(Stats::of(&[1.0, f64::NAN]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn summary_is_permutation_invariant(values in prop::collection::vec(-100.0f64..100.0, 1..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(Stats::of(&values).unwrap(), Stats::of(&shuffled).unwrap());
        let s = Stats::of(&values).unwrap();
        prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
    }

    #[test]
    fn ssim_is_bounded_and_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(&mut rng, 16);
        let y = random_image(&mut rng, 16);
        let p = SsimParams::default();
        let a = ssim(&x, &y, &p).unwrap();
        prop_assert!((a - ssim(&y, &x, &p).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }
}

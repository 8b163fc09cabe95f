use latent_ct::geometry::{backproject, project, subsample_views};
use latent_ct::{FanBeamGeometry, Image, Sinogram};
use proptest::prelude::*;

mod common;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn dense_oracle_matches_project_and_backproject() {
    for g in [small(8, 12, 10), small(8, 7, 13).with_stride(2)] {
        let a = dense_oracle(&g);
        let n = g.image_size_px;
        let (views, dets) = g.sinogram_shape();
        let mut worst: f64 = 0.0;
        for j in 0..n * n {
            let mut basis = Image::zeros(n);
            basis.data_mut()[j] = 1.0;
            let col = project(&g, &basis).unwrap();
            for (i, &v) in col.data().iter().enumerate() {
                worst = worst.max((v - a[i][j]).abs());
            }
        }
        for i in 0..views * dets {
            let mut basis = Sinogram::zeros(views, dets);
            basis.data_mut()[i] = 1.0;
            let row = backproject(&g, &basis).unwrap();
            for (j, &v) in row.data().iter().enumerate() {
                worst = worst.max((v - a[i][j]).abs());
            }
        }
        assert!(worst <= 1e-10, "max deviation {worst:e}");
    }
}

#[test]
fn isocentre_pixel_row_sums_equal_total_intersection() {
    // an even grid has no pixel centred exactly on the axis; use odd size
    let g = FanBeamGeometry { pixel_spacing_mm: 3.0, ..small(9, 10, 31) };
    let a = dense_oracle(&g);
    let centre = 4 * 9 + 4;
    let mut pixel = Image::zeros(9);
    pixel.data_mut()[centre] = 1.0;
    let sino = project(&g, &pixel).unwrap();
    for v in 0..10 {
        let sum: f64 = sino.view(v).iter().sum();
        let oracle: f64 = (0..31).map(|k| a[v * 31 + k][centre]).sum();
        assert!((sum - oracle).abs() < 1e-10);
        assert!(sum > 0.0);
    }
}

fn disk(n: usize, radius_px: f64) -> Image {
    let c = n as f64 / 2.0;
    Image::from_fn(n, |r, col| {
        let (x, y) = (col as f64 + 0.5 - c, r as f64 + 0.5 - c);
        if x.hypot(y) <= radius_px {
            1.0
        } else {
            0.0
        }
    })
}

#[test]
fn disk_chords_match_analytic_lengths() {
    let g = FanBeamGeometry { n_views: 16, n_detectors: 257, detector_spacing_mm: 1.0, ..FanBeamGeometry::desk(256) };
    let radius_px = 100.0;
    let radius_mm = radius_px * g.pixel_spacing_mm;
    let sino = project(&g, &disk(256, radius_px)).unwrap();
    let mut checked = 0;
    for v in 0..16 {
        for k in 0..257 {
            let fan = g.detector_angle(k);
            let p = g.source_to_center_mm * fan.sin();
            if p.abs() > 0.9 * radius_mm {
                continue;
            }
            let chord = 2.0 * (radius_mm * radius_mm - p * p).sqrt();
            let got = sino.data()[v * 257 + k];
            assert!((got - chord).abs() / chord < 0.01, "view {v} det {k}: {got} vs {chord}");
            checked += 1;
        }
    }
    assert!(checked > 1000);
    // the central element reads the diameter
    assert!((sino.data()[128] - 2.0 * radius_mm).abs() / (2.0 * radius_mm) < 0.01);
}

#[test]
fn centred_disk_sinogram_is_constant_across_views() {
    let g = FanBeamGeometry { n_views: 24, ..FanBeamGeometry::desk(256) };
    let sino = project(&g, &disk(256, 100.0)).unwrap();
    let totals: Vec<f64> = (0..24).map(|v| sino.view(v).iter().sum()).collect();
    let (lo, hi) = totals.iter().fold((f64::MAX, f64::MIN), |(a, b), &t| (a.min(t), b.max(t)));
    assert!((hi - lo) / hi < 1e-3, "spread {}", (hi - lo) / hi);
}

#[test]
fn adjoint_identity_on_reference_size() {
    let g = small(16, 20, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = random_image(&mut rng, 16);
        let s = random_sinogram(&mut rng, 20, 24);
        let ax = project(&g, &x).unwrap();
        let ats = backproject(&g, &s).unwrap();
        let err = (ax.dot(&s) - x.dot(&ats)).abs() / (ax.norm_sq().sqrt() * s.norm_sq().sqrt());
        assert!(err <= 1e-6, "{err:e}");
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let g = FanBeamGeometry::desk(32).with_stride(7);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_image(&mut rng, 32);
    let (views, dets) = g.sinogram_shape();
    let s = random_sinogram(&mut rng, views, dets);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| (project(&g, &x).unwrap(), backproject(&g, &s).unwrap()))
    };
    let reference = run(1);
    for threads in [2, 3, 5] {
        let other = run(threads);
        assert_eq!(other.0.data(), reference.0.data());
        assert_eq!(other.1.data(), reference.1.data());
    }
}

#[test]
fn clinical_stride_examples() {
    let g = FanBeamGeometry::clinical();
    assert_eq!(g.sinogram_shape(), (800, 528));
    assert_eq!(g.with_stride(10).sinogram_shape(), (80, 528));
    assert_eq!(g.with_stride(20).sinogram_shape(), (40, 528));
    let full = Sinogram::new(800, 2, (0..1600).map(f64::from).collect()).unwrap();
    assert_eq!(subsample_views(&full, 10).unwrap().n_views(), 80);
    assert_eq!(subsample_views(&full, 20).unwrap().n_views(), 40);
}

#[test]
fn geometry_json_uses_flat_field_names() {
    let text = serde_json::to_string(&FanBeamGeometry::clinical()).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in [
        "source_to_center_mm",
        "source_to_detector_mm",
        "n_detectors",
        "detector_spacing_mm",
        "n_views",
        "image_size_px",
        "pixel_spacing_mm",
        "view_subsample_stride",
    ] {
        assert!(value.get(key).is_some(), "missing {key}");
    }
    assert_eq!(value["source_to_center_mm"], 1150.0);
    let back: FanBeamGeometry = serde_json::from_str(&text).unwrap();
    assert_eq!(back, FanBeamGeometry::clinical());
}

fn arb_geometry() -> impl Strategy<Value = FanBeamGeometry> {
    (4usize..14, 1usize..12, 2usize..20, 1usize..4, 30.0f64..80.0).prop_map(|(n, views, dets, stride, r)| {
        FanBeamGeometry {
            source_to_center_mm: r,
            source_to_detector_mm: r * 1.6,
            n_detectors: dets,
            detector_spacing_mm: 30.0 / dets as f64,
            n_views: views,
            image_size_px: n,
            pixel_spacing_mm: 20.0 / n as f64,
            view_subsample_stride: stride,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_identity_holds_for_random_geometries(g in arb_geometry(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (views, dets) = g.sinogram_shape();
        let x = random_image(&mut rng, g.image_size_px);
        let s = random_sinogram(&mut rng, views, dets);
        let ax = project(&g, &x).unwrap();
        let ats = backproject(&g, &s).unwrap();
        let scale = ax.norm_sq().sqrt() * s.norm_sq().sqrt();
        prop_assume!(scale > 0.0);
        prop_assert!((ax.dot(&s) - x.dot(&ats)).abs() / scale <= 1e-6);
    }

    #[test]
    fn projection_is_linear(g in arb_geometry(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = random_image(&mut rng, g.image_size_px);
        let x2 = random_image(&mut rng, g.image_size_px);
        let mut combo = x1.scaled(a);
        combo.add_scaled(b, &x2);
        let lhs = project(&g, &combo).unwrap();
        let p1 = project(&g, &x1).unwrap();
        let p2 = project(&g, &x2).unwrap();
        for ((l, u), v) in lhs.data().iter().zip(p1.data()).zip(p2.data()) {
            prop_assert!((l - (a * u + b * v)).abs() <= 1e-10 * (1.0 + l.abs()));
        }
    }
}

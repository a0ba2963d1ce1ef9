use featrep::geometry::BBox;
use featrep::imaging::{
    build_pyramid, crop_normalize_window, derivative_map, pyramid_scales, resize_bilinear, sample_patches,
    DerivativeKind, GrayImage, PyramidConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [DerivativeKind; 4] = [DerivativeKind::Dx, DerivativeKind::Dy, DerivativeKind::Dxx, DerivativeKind::Dyy];

fn noise(seed: u64, w: usize, h: usize) -> GrayImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..0.5)).collect();
    GrayImage::new(w, h, px).unwrap()
}

/// Multiples of 1/256 below 1/2: sums and differences stay exact.
fn dyadic(seed: u64, w: usize, h: usize) -> GrayImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0..128u32) as f64 / 256.0).collect();
    GrayImage::new(w, h, px).unwrap()
}

#[test]
fn horizontal_ramp_derivatives() {
    let ramp = GrayImage::<f64>::from_fn(16, 16, |x, _| x as f64 / 15.0);
    let dx = derivative_map(&ramp, DerivativeKind::Dx).unwrap();
    let dy = derivative_map(&ramp, DerivativeKind::Dy).unwrap();
    let dxx = derivative_map(&ramp, DerivativeKind::Dxx).unwrap();
    for y in 0..16 {
        for x in 1..15 {
            assert!((dx.get(x, y) - 2.0 / 15.0).abs() < 1e-12);
            assert!(dxx.get(x, y).abs() < 1e-12);
        }
        for x in 0..16 {
            assert_eq!(dy.get(x, y), 0.0);
        }
        // replicate padding halves the border response
        assert!((dx.get(0, y) - 1.0 / 15.0).abs() < 1e-12);
    }
}

#[test]
fn resize_of_constant_is_constant() {
    for (w, h) in [(1, 1), (7, 3), (64, 128), (200, 51)] {
        let img = GrayImage::<f64>::filled(31, 17, 0.3);
        let out = resize_bilinear(&img, w, h).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.3));
    }
}

#[test]
fn pyramid_dims_follow_scales() {
    let img = noise(1, 300, 420);
    let cfg = PyramidConfig::default();
    let levels = build_pyramid(&img, &cfg).unwrap();
    // 3·ln2/ln1.07 rounds up to 31, so at most 32 levels
    assert!(levels.len() <= 32 && levels.len() > 1);
    for w in levels.windows(2) {
        assert!(w[0].scale > w[1].scale);
    }
    for l in &levels {
        assert_eq!(l.image.width(), (300.0 * l.scale).round() as usize);
        assert_eq!(l.image.height(), (420.0 * l.scale).round() as usize);
        assert!(l.image.width() >= 64 && l.image.height() >= 128);
    }
    // largest k with 1.07^-k >= 1/8 is floor(30.73) = 30
    let big = pyramid_scales(4000, 8000, &cfg).unwrap();
    assert_eq!(big.len(), 31);
    assert!(pyramid_scales(63, 500, &cfg).unwrap().is_empty());
    assert!(pyramid_scales(100, 100, &PyramidConfig { step: 1.0, ..cfg }).is_err());
}

#[test]
fn sampling_is_independent_of_thread_count() {
    let images: Vec<GrayImage<f32>> = (0..4).map(|s| noise(s, 40 + s as usize * 7, 30).cast()).collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| sample_patches(&images, 300, 9).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, sample_patches(&images, 300, 9).unwrap());
    assert_ne!(one, sample_patches(&images, 300, 10).unwrap());
    for p in &one {
        let src = &images[p.source.image];
        assert_eq!(p.pixels, src.crop(p.source.x, p.source.y, 16, 16).unwrap());
    }
    assert!(sample_patches(&[GrayImage::<f32>::filled(15, 40, 0.0)], 1, 0).is_err());
}

#[test]
fn window_crop_cases() {
    let img = noise(2, 120, 200);
    let pure = crop_normalize_window(&img, &BBox::new(10.0, 20.0, 64.0, 128.0)).unwrap();
    assert_eq!(pure, img.crop(10, 20, 64, 128).unwrap());

    // 32×128 widens to 64×128 around its center
    let narrow = crop_normalize_window(&img, &BBox::new(26.0, 20.0, 32.0, 128.0)).unwrap();
    assert_eq!(narrow, pure);

    let flat = GrayImage::<f64>::filled(50, 50, 0.7);
    let out = crop_normalize_window(&flat, &BBox::new(-20.0, 30.0, 33.0, 41.0)).unwrap();
    assert_eq!((out.width(), out.height()), (64, 128));
    assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    assert!(crop_normalize_window(&flat, &BBox::new(0.0, 0.0, 0.0, 10.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn derivatives_are_linear(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (i1, i2) = (noise(seed, 19, 13), noise(seed ^ 1, 19, 13));
        let mix = GrayImage::new(19, 13, i1.data().iter().zip(i2.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        for kind in KINDS {
            let (d1, d2, dm) = (derivative_map(&i1, kind).unwrap(), derivative_map(&i2, kind).unwrap(), derivative_map(&mix, kind).unwrap());
            for k in 0..dm.data.len() {
                prop_assert!((dm.data[k] - (a * d1.data[k] + b * d2.data[k])).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn derivatives_ignore_constant_shift(seed in any::<u64>(), c in 0u32..128) {
        let img = dyadic(seed, 11, 17);
        let shifted = img.map(|v| v + c as f64 / 256.0);
        for kind in KINDS {
            prop_assert_eq!(derivative_map(&img, kind).unwrap(), derivative_map(&shifted, kind).unwrap());
        }
    }

    #[test]
    fn resize_stays_in_range(seed in any::<u64>(), w in 1usize..80, h in 1usize..80) {
        let img = noise(seed, 23, 29);
        let out = resize_bilinear(&img, w, h).unwrap();
        prop_assert_eq!((out.width(), out.height()), (w, h));
        prop_assert!(out.data().iter().all(|&v| (0.0..0.5).contains(&v)));
    }
}

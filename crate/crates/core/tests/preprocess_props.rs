use gazesynth::preprocess::*;
use gazesynth::raster::Raster;
use nalgebra::Point2;
use proptest::prelude::*;

fn textured(w: u32, h: u32, seed: u32) -> Raster {
    let pixels = (0..h)
        .flat_map(|y| (0..w).map(move |x| 1 + ((x.wrapping_mul(31) ^ y.wrapping_mul(17)).wrapping_add(seed) % 255) as u8))
        .collect();
    Raster::from_pixels(w, h, pixels).unwrap()
}

/// Outer corners `dist` apart around `mid`, rolled by `roll_deg`, with extras.
fn landmarks(mid: (f64, f64), dist: f64, roll_deg: f64) -> LandmarkSet {
    let (s, c) = roll_deg.to_radians().sin_cos();
    let half = Point2::new(c * dist / 2.0, s * dist / 2.0).coords;
    let m = Point2::new(mid.0, mid.1);
    LandmarkSet {
        outer_left: m - half,
        outer_right: m + half,
        extra: vec![m - half * 0.4, m + half * 0.4, m + Point2::new(3.0, -2.0).coords, m],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn canvas_invariants(
        mid in (120.0..520.0f64, 90.0..270.0f64),
        dist in 40.0..255.0f64,
        roll in -35.0..35.0f64,
        seed in any::<u32>(),
    ) {
        let src = textured(640, 360, seed);
        let lm = landmarks(mid, dist, roll);
        let config = PreprocessConfig::default();
        let canvas = preprocess(&src, &lm, &config).unwrap();
        prop_assert_eq!((canvas.raster.width(), canvas.raster.height()), (390, 85));

        let (leveled, lm_level, _) = normalize_roll(&src, &lm).unwrap();
        prop_assert!((lm_level.outer_left.y - lm_level.outer_right.y).abs() < 0.5);
        prop_assert!((canvas.landmarks.outer_left.y - canvas.landmarks.outer_right.y).abs() < 0.5);

        let (crop, _, _) = crop_eyes(&leveled, &lm_level, &config).unwrap();
        let (w, h) = (crop.width(), crop.height());
        let (left, top) = ((390 - w) / 2, (85 - h) / 2);
        for y in 0..85 {
            for x in 0..390 {
                let v = canvas.raster.get(x, y);
                if x < left || x >= left + w || y < top || y >= top + h {
                    prop_assert_eq!(v, 0);
                } else {
                    prop_assert_eq!(v, crop.get(x - left, y - top));
                }
            }
        }

        for (p, q) in lm.points().zip(canvas.landmarks.points()) {
            prop_assert!((canvas.transform.apply(p) - q).norm() < 1e-6);
        }
        let expected_border = 1.0 - f64::from(w * h) / f64::from(390 * 85);
        prop_assert!((canvas.border_fraction - expected_border).abs() < 1e-15);
    }

    #[test]
    fn border_fraction_decreases_with_corner_distance(
        mid in (200.0..440.0f64, 150.0..210.0f64),
        roll in -20.0..20.0f64,
        start in 30.0..60.0f64,
    ) {
        let src = textured(640, 360, 3);
        let step = (250.0 - start) / 9.0;
        let fractions: Vec<f64> = (0..10)
            .map(|i| preprocess(&src, &landmarks(mid, start + step * i as f64, roll), &PreprocessConfig::default()).unwrap().border_fraction)
            .collect();
        for pair in fractions.windows(2) {
            prop_assert!(pair[1] < pair[0], "{:?}", fractions);
        }
    }
}

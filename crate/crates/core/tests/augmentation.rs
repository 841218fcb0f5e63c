use cineseg::augmentation::{
    affine, affine_image, augment_batch, elastic, gaussian_kernel, AffineParams, AugPolicy, Interpolation,
};
use cineseg::image::{Grayscale2D, MaskImage, Spacing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pair(rng: &mut impl Rng, h: usize, w: usize) -> (Grayscale2D, MaskImage) {
    let image = Grayscale2D::from_fn(h, w, Spacing::default(), |_, _| rng.gen()).unwrap();
    let mask = MaskImage::from_fn(h, w, |_, _| rng.gen_bool(0.4)).unwrap();
    (image, mask)
}

fn max_abs_diff(a: &Grayscale2D, b: &Grayscale2D) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn is_binary(mask: &MaskImage) -> bool {
    mask.pixels().iter().all(|&p| p <= 1)
}

fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> MaskImage {
    MaskImage::from_fn(h, w, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r).unwrap()
}

fn dice(a: &MaskImage, b: &MaskImage) -> f64 {
    let inter = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .filter(|(p, q)| **p == 1 && **q == 1)
        .count();
    2.0 * inter as f64 / (a.count() + b.count()) as f64
}

#[test]
fn identity_affine_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (h, w) in [(4, 4), (7, 5), (32, 32)] {
        let (image, mask) = random_pair(&mut rng, h, w);
        let (i2, m2) = affine(&image, &mask, &AffineParams::IDENTITY).unwrap();
        assert_eq!(i2, image);
        assert_eq!(m2, mask);
    }
}

#[test]
fn full_turn_matches_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (image, mask) = random_pair(&mut rng, 9, 12);
    for deg in [360.0, -360.0, 720.0] {
        let (i2, m2) = affine(&image, &mask, &AffineParams::rotation(deg)).unwrap();
        assert!(max_abs_diff(&i2, &image) < 1e-6);
        assert_eq!(m2, mask);
    }
}

#[test]
fn quarter_turn_permutes_pixels() {
    let values: Vec<f64> = (0..16).map(|v| v as f64 / 16.0).collect();
    let image = Grayscale2D::new(4, 4, values, Spacing::default()).unwrap();
    let mask = MaskImage::new(4, 4, vec![1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0]).unwrap();

    let (r90, m90) = affine(&image, &mask, &AffineParams::rotation(90.0)).unwrap();
    let (r180, m180) = affine(&image, &mask, &AffineParams::rotation(180.0)).unwrap();
    let (r270, m270) = affine(&image, &mask, &AffineParams::rotation(270.0)).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(r90.get(y, x), image.get(3 - x, y));
            assert_eq!(m90.get(y, x), mask.get(3 - x, y));
            assert_eq!(r180.get(y, x), image.get(3 - y, 3 - x));
            assert_eq!(m180.get(y, x), mask.get(3 - y, 3 - x));
            assert_eq!(r270.get(y, x), image.get(x, 3 - y));
            assert_eq!(m270.get(y, x), mask.get(x, 3 - y));
        }
    }
}

#[test]
fn integer_shift_translates_and_fills_with_zero() {
    let values: Vec<f64> = (1..=20).map(|v| v as f64).collect();
    let image = Grayscale2D::new(4, 5, values, Spacing::default()).unwrap();
    let mask = MaskImage::from_fn(4, 5, |_, _| true).unwrap();
    let params = AffineParams {
        shift_x: 2.0,
        shift_y: -1.0,
        ..AffineParams::IDENTITY
    };
    let (out, m) = affine(&image, &mask, &params).unwrap();
    for y in 0..4 {
        for x in 0..5 {
            let (sy, sx) = (y as isize + 1, x as isize - 2);
            let inside = (0..4).contains(&sy) && (0..5).contains(&sx);
            let want = if inside {
                image.get(sy as usize, sx as usize)
            } else {
                0.0
            };
            assert_eq!(out.get(y, x), want);
            assert_eq!(m.get(y, x), inside);
        }
    }
}

#[test]
fn mask_as_image_with_nearest_matches_mask_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let policy = AugPolicy::default();
    for _ in 0..50 {
        let (image, mask) = random_pair(&mut rng, 16, 20);
        let params = policy.sample_affine(16, 20, &mut rng);
        let (_, m) = affine(&image, &mask, &params).unwrap();
        let as_image = affine_image(&mask.to_image(Spacing::default()), &params, Interpolation::Nearest).unwrap();
        assert_eq!(m.to_image(Spacing::default()), as_image);
    }
}

#[test]
fn non_positive_scale_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (image, mask) = random_pair(&mut rng, 4, 4);
    let params = AffineParams {
        scale: 0.0,
        ..AffineParams::IDENTITY
    };
    assert!(affine(&image, &mask, &params).is_err());
}

#[test]
fn elastic_with_zero_alpha_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (image, mask) = random_pair(&mut rng, 24, 17);
    let (i2, m2) = elastic(&image, &mask, 0.0, 4.0, &mut rng).unwrap();
    assert_eq!(i2, image);
    assert_eq!(m2, mask);
}

#[test]
fn elastic_keeps_constant_images_constant() {
    let image = Grayscale2D::from_fn(20, 20, Spacing::default(), |_, _| 0.625).unwrap();
    let mask = MaskImage::empty(20, 20).unwrap();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, _) = elastic(&image, &mask, 60.0, 3.0, &mut rng).unwrap();
        assert!(out.pixels().iter().all(|&p| (p - 0.625).abs() < 1e-12));
    }
}

/// Direct scalar evaluation of the elastic formula: raw uniform fields,
/// full 2-D Gaussian convolution with edge replication, scaling by alpha,
/// clamped sample positions, bilinear image / nearest mask reads.
fn elastic_reference(image: &Grayscale2D, mask: &MaskImage, alpha: f64, sigma: f64, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let (h, w) = (image.height(), image.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let raw_y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..=1.0)).collect();

    let r = (3.0 * sigma).ceil() as i64;
    let g = |k: i64| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp();
    let norm: f64 = (-r..=r).map(g).sum::<f64>().powi(2);
    let at = |f: &[f64], y: i64, x: i64| f[(y.clamp(0, h as i64 - 1) * w as i64 + x.clamp(0, w as i64 - 1)) as usize];
    let conv = |f: &[f64], y: i64, x: i64| {
        let mut acc = 0.0;
        for i in -r..=r {
            for j in -r..=r {
                acc += g(i) * g(j) * at(f, y + i, x + j);
            }
        }
        alpha * acc / norm
    };

    let mut pixels = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let sx = (x as f64 + conv(&raw_x, y as i64, x as i64)).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + conv(&raw_y, y as i64, x as i64)).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let read = |yy: usize, xx: usize| if yy < h && xx < w { image.get(yy, xx) } else { 0.0 };
            pixels.push(
                (1.0 - fx) * (1.0 - fy) * read(y0, x0)
                    + fx * (1.0 - fy) * read(y0, x0 + 1)
                    + (1.0 - fx) * fy * read(y0 + 1, x0)
                    + fx * fy * read(y0 + 1, x0 + 1),
            );
            labels.push(mask.get(sy.round() as usize, sx.round() as usize) as u8);
        }
    }
    (pixels, labels)
}

#[test]
fn elastic_matches_scalar_reference_on_checkerboard() {
    let (h, w) = (64, 64);
    let image = Grayscale2D::from_fn(h, w, Spacing::default(), |y, x| ((y / 8 + x / 8) % 2) as f64).unwrap();
    let mask = MaskImage::from_fn(h, w, |y, x| (y / 8 + x / 8) % 2 == 1).unwrap();
    for seed in [0, 17] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, m) = elastic(&image, &mask, 34.0, 4.0, &mut rng).unwrap();
        let (want_pixels, want_mask) = elastic_reference(&image, &mask, 34.0, 4.0, seed);
        let worst = out
            .pixels()
            .iter()
            .zip(&want_pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
        assert_eq!(m.pixels(), &want_mask[..]);
        assert_ne!(out, image);
    }
}

#[test]
fn elastic_deviation_grows_with_alpha() {
    // Lipschitz constant 0.05 per axis, and every smoothed unit offset lies
    // in [−1, 1], so the bilinear output moves by at most 2 · 0.05 · alpha.
    let lip = 0.05;
    let image = Grayscale2D::from_fn(32, 32, Spacing::default(), |y, x| lip * (y as f64 + x as f64) / 2.0).unwrap();
    let mask = MaskImage::empty(32, 32).unwrap();
    let mut last = 0.0;
    for alpha in [0.0, 0.1, 1.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (out, _) = elastic(&image, &mask, alpha, 4.0, &mut rng).unwrap();
        let diff = max_abs_diff(&out, &image);
        assert!(diff <= 2.0 * lip * alpha + 1e-15, "alpha {alpha}: {diff}");
        assert!(diff >= last);
        last = diff;
    }
    assert!(last > 0.0);
}

#[test]
fn disk_overlap_decreases_with_alpha() {
    let truth = disk(48, 48, 23.5, 23.5, 12.0);
    let image = truth.to_image(Spacing::default());
    let mut last = f64::INFINITY;
    for alpha in [0.0, 10.0, 34.0, 80.0, 160.0] {
        let mean: f64 = (0..20)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (_, m) = elastic(&image, &truth, alpha, 4.0, &mut rng).unwrap();
                dice(&truth, &m)
            })
            .sum::<f64>()
            / 20.0;
        assert!(mean < last || alpha == 0.0, "alpha {alpha}: {mean} vs {last}");
        last = mean;
    }
}

#[test]
fn random_policies_keep_masks_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..500 {
        let policy = AugPolicy {
            multiplicity: 2,
            affine: rng.gen_bool(0.8),
            rotate_deg: rng.gen_range(0.0..180.0),
            scale_min: rng.gen_range(0.5..1.0),
            scale_max: rng.gen_range(1.0..1.5),
            shift_frac: rng.gen_range(0.0..0.3),
            elastic: rng.gen_bool(0.8),
            alpha: rng.gen_range(0.0..60.0),
            sigma: rng.gen_range(0.5..6.0),
        };
        let pair = random_pair(&mut rng, 12, 12);
        let out = augment_batch(&[pair], &policy, i).unwrap();
        assert!(out.iter().all(|(_, m)| is_binary(m)));
    }
}

#[test]
fn augment_batch_counting_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pairs: Vec<_> = (0..10).map(|_| random_pair(&mut rng, 16, 16)).collect();

    let same = augment_batch(&pairs, &AugPolicy::none(), 1).unwrap();
    assert_eq!(same, pairs);

    let policy = AugPolicy {
        multiplicity: 3,
        ..AugPolicy::default()
    };
    let a = augment_batch(&pairs, &policy, 99).unwrap();
    let b = augment_batch(&pairs, &policy, 99).unwrap();
    let c = augment_batch(&pairs, &policy, 100).unwrap();
    assert_eq!(a.len(), 30);
    assert_eq!(&a[..10], &pairs[..]);
    assert_eq!(a, b);
    assert_ne!(a[10..], c[10..]);

    // Each copy depends only on its own index, not on the batch around it.
    let solo = augment_batch(&pairs[3..4], &policy, 99).unwrap();
    assert_ne!(solo[1], a[13]);
    let prefix = augment_batch(&pairs[..4], &policy, 99).unwrap();
    assert_eq!(prefix[4 + 3], a[10 + 3]);
}

#[test]
fn invalid_policies_name_the_field() {
    let bad = AugPolicy {
        multiplicity: 0,
        ..AugPolicy::default()
    };
    assert!(matches!(bad.validate(), Err(cineseg::Error::Config { field, .. }) if field == "multiplicity"));
    let bad = AugPolicy {
        sigma: 0.0,
        ..AugPolicy::default()
    };
    assert!(matches!(bad.validate(), Err(cineseg::Error::Config { field, .. }) if field == "sigma"));
    assert_eq!(gaussian_kernel(1.0).len(), 7);
}

//! Independent recomputations of the numeric building blocks.

use std::collections::BTreeMap;

use rfnns::attack::{apply_exact, apply_surrogate, gaussian_noise_field, AttackKind, AttackSpec};
use rfnns::decoder::CapacityProfile;
use rfnns::image::{ImageTensor, Tensor};
use rfnns::keyed::{derive_stream, DeterministicStream};
use rfnns::metrics::{mse, psnr, ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use rfnns::texture::{block_entropy, complexity_map, lbp_code, Luminance, ENTROPY_EPSILON};

fn random_image(s: &mut DeterministicStream, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(Tensor::from_fn(c, h, w, |_, _, _| s.uniform())).unwrap()
}

/// Textbook SSIM: explicit 2-D Gaussian weights, moments about the window
/// mean.
fn reference_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (c, h, w) = a.shape();
    let r = (SSIM_WINDOW / 2) as f64;
    let mut weights = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            weights[i * SSIM_WINDOW + j] = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);

    let mut sum = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut n = 0;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let at = |img: &ImageTensor, i: usize, j: usize| img.get(ch, y0 + i, x0 + j);
                let (mut ux, mut uy) = (0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let k = weights[i * SSIM_WINDOW + j];
                        ux += k * at(a, i, j);
                        uy += k * at(b, i, j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let k = weights[i * SSIM_WINDOW + j];
                        let (dx, dy) = (at(a, i, j) - ux, at(b, i, j) - uy);
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cov += k * dx * dy;
                    }
                }
                acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
                n += 1;
            }
        }
        sum += acc / n as f64;
    }
    sum / c as f64
}

#[test]
fn ssim_matches_reference_on_random_pairs() {
    let mut s = derive_stream(11, "oracle/ssim");
    for k in 0..10 {
        let side = 16 + 3 * k;
        let a = random_image(&mut s, 3, side, side + k);
        // Mix of correlated and unrelated pairs.
        let noise = 0.1 * k as f64;
        let b = ImageTensor::from_clamped(
            &Tensor::from_fn(3, side, side + k, |c, y, x| {
                (1.0 - noise) * a.get(c, y, x) + noise * s.uniform()
            }),
        );
        let got = ssim(&a, &b).unwrap();
        let want = reference_ssim(&a, &b);
        assert!((got - want).abs() < 1e-6, "pair {k}: {got} vs {want}");
    }
}

#[test]
fn ssim_of_identical_images_is_exactly_one() {
    let mut s = derive_stream(12, "oracle/ssim-id");
    for _ in 0..5 {
        let a = random_image(&mut s, 3, 20, 20);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn psnr_matches_mse_formula() {
    let mut s = derive_stream(13, "oracle/psnr");
    for _ in 0..20 {
        let a = random_image(&mut s, 3, 12, 12);
        let b = random_image(&mut s, 3, 12, 12);
        let m = mse(a.tensor(), b.tensor()).unwrap();
        let naive: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.data().len() as f64;
        assert!((m - naive).abs() < 1e-15);
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    }
}

fn naive_entropy(codes: &[u8]) -> f64 {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for &c in codes {
        *counts.entry(c).or_default() += 1;
    }
    let n = codes.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&k| {
            let p = k as f64 / n;
            -p * (p + ENTROPY_EPSILON).log2()
        })
        .sum();
    h.max(0.0)
}

#[test]
fn block_entropy_matches_naive_recount() {
    let mut s = derive_stream(14, "oracle/entropy");
    // 10 images of 10x10 blocks = 1000 blocks; a coarse palette makes ties
    // and repeated codes common.
    let mut checked = 0;
    for img_idx in 0..10 {
        let levels = 2 + img_idx * 3;
        let img = ImageTensor::new(Tensor::from_fn(3, 80, 80, |_, _, _| {
            (s.uniform() * levels as f64).floor() / levels as f64
        }))
        .unwrap();
        let map = complexity_map(&img, 8).unwrap();
        let lum = Luminance::from_image(&img);
        for br in 0..10 {
            for bc in 0..10 {
                let mut codes = Vec::with_capacity(64);
                for y in br * 8..br * 8 + 8 {
                    for x in bc * 8..bc * 8 + 8 {
                        codes.push(lbp_code(&lum, y, x));
                    }
                }
                let want = naive_entropy(&codes);
                assert!((block_entropy(&codes).unwrap() - want).abs() <= 1e-12);
                let o = map.get(br, bc);
                assert!((o - want).abs() <= 1e-12);
                assert!((0.0..=8.0).contains(&o));
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 1000);
}

#[test]
fn entropy_extremes() {
    let all: Vec<u8> = (0..=255).collect();
    assert!((block_entropy(&all).unwrap() - 8.0).abs() < 1e-9);
    assert_eq!(block_entropy(&[7; 64]).unwrap(), 0.0);
}

#[test]
fn gaussian_noise_has_requested_variance() {
    let field = gaussian_noise_field(3, 0.07, (3, 128, 128));
    let n = field.len() as f64;
    let mean = field.sum() / n;
    let var = field.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!((var / 0.07 - 1.0).abs() < 0.1, "variance {var}");
}

fn smooth_image(side: usize) -> ImageTensor {
    ImageTensor::new(Tensor::from_fn(3, side, side, |c, y, x| {
        let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
        0.5 + 0.3 * (3.0 * u + c as f64).sin() * (2.0 * v).cos()
    }))
    .unwrap()
    .quantize8()
}

#[test]
fn jpeg_at_full_quality_is_near_lossless() {
    let img = smooth_image(64);
    let out = apply_exact(&AttackSpec::jpeg(100.0).unwrap(), &img).unwrap();
    let p = psnr(&img, &out).unwrap();
    assert!(p >= 40.0, "{p} dB");
}

#[test]
fn exact_and_surrogate_forward_agree() {
    let img = smooth_image(40);
    for spec in [
        "identity:0",
        "jpeg:80",
        "jpeg:50",
        "gaussian_noise:0.01",
        "contrast:0.7",
        "scaling:0.5",
        "rotation:10",
        "gaussian_blur:1.5",
    ] {
        let spec: AttackSpec = spec.parse().unwrap();
        let exact = apply_exact(&spec, &img).unwrap();
        let (sur, _) = apply_surrogate(&spec, img.tensor()).unwrap();
        let worst = exact
            .data()
            .iter()
            .zip(sur.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{spec}: {worst}");
        assert!(exact.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn neutral_attacks_are_bit_exact() {
    let mut s = derive_stream(15, "oracle/identity");
    let img = random_image(&mut s, 3, 33, 33);
    for spec in [
        AttackSpec::contrast(1.0).unwrap(),
        AttackSpec::new(AttackKind::Rotation, 0.0).unwrap(),
        AttackSpec::identity(),
    ] {
        assert_eq!(apply_exact(&spec, &img).unwrap(), img, "{spec}");
    }
}

#[test]
fn capacity_points() {
    let mut rates: Vec<f64> = CapacityProfile::BUILTIN_NAMES
        .iter()
        .map(|n| CapacityProfile::builtin(n).unwrap().bpp())
        .collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    for want in [0.375, 1.5, 6.0, 13.5, 24.0] {
        assert!(rates.contains(&want), "{want} bpp missing from {rates:?}");
    }
    let p = CapacityProfile::new("check", 512, 96, 84).unwrap();
    assert_eq!(p.bpp(), 24.0 * 96.0 * 96.0 / (512.0 * 512.0));
}

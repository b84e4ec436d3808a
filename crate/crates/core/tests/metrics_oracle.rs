mod support;

use edibnet::metrics::{psnr, ssim};
use edibnet::{Shape, Tensor};
use proptest::prelude::*;
use support::fd::random;
use support::oracles::ssim_reference;

fn unit(shape: Shape, seed: u64) -> Tensor {
    random(shape, seed).map(|v| 0.5 + 0.5 * v)
}

#[test]
fn psnr_closed_forms() {
    let a = Tensor::zeros(Shape::new(1, 1, 4, 4));
    let b = Tensor::full(a.shape(), 0.1);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-3);
    let c = Tensor::full(a.shape(), 1.0);
    assert!((psnr(&a, &c, 255.0).unwrap() - 48.1308).abs() < 1e-3);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
}

#[test]
fn ssim_of_identical_images_is_one() {
    for seed in 0..5 {
        let a = unit(Shape::new(1, 3, 24, 20), seed);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn ssim_matches_reference_on_20_pairs() {
    for i in 0..20u64 {
        let shape = Shape::new(1, 1 + (i as usize % 3), 16 + (i as usize % 5), 18 + (i as usize % 4));
        let a = unit(shape, 2 * i);
        // correlated partner so the scores spread across (0, 1)
        let noise = random(shape, 2 * i + 1);
        let mix = (i as f32 + 1.0) / 21.0;
        let b = a.zip_map(&noise, |x, n| (1.0 - mix) * x + mix * (0.5 + 0.5 * n)).unwrap();
        let got = ssim(&a, &b, 1.0).unwrap();
        let want = ssim_reference(&a, &b, 1.0);
        assert!((got - want).abs() < 1e-4, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn blurred_noise_psnr_is_finite_and_below_60() {
    use edibnet::blur::{apply_blur, BlurKernel};
    let x = unit(Shape::new(1, 3, 32, 32), 77);
    let k = BlurKernel::new("box", 3, 3, vec![1.0; 9]).unwrap();
    let p = psnr(&apply_blur(&x, &k).unwrap(), &x, 1.0).unwrap();
    assert!(p.is_finite() && p < 60.0, "{p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_symmetric_and_bounded(seed in 0u64..10_000) {
        let a = unit(Shape::new(1, 1, 14, 14), seed);
        let b = unit(Shape::new(1, 1, 14, 14), seed + 1);
        let ab = ssim(&a, &b, 1.0).unwrap();
        let ba = ssim(&b, &a, 1.0).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-9 && ab >= -1.0);
    }

    #[test]
    fn ssim_invariant_to_joint_scaling(seed in 0u64..10_000, k in 0.2f32..4.0) {
        // scaling both images and the peak together leaves every term's ratio unchanged
        let a = unit(Shape::new(1, 2, 12, 13), seed);
        let b = unit(Shape::new(1, 2, 12, 13), seed + 1);
        let s1 = ssim(&a, &b, 1.0).unwrap();
        let s2 = ssim(&a.scale(k), &b.scale(k), k as f64).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-5);
    }

    #[test]
    fn psnr_decreases_with_error(seed in 0u64..10_000, e in 0.01f32..0.2) {
        let a = unit(Shape::new(1, 3, 8, 8), seed);
        let small = a.map(|v| v + e);
        let large = a.map(|v| v + 2.0 * e);
        prop_assert!(psnr(&a, &small, 1.0).unwrap() > psnr(&a, &large, 1.0).unwrap());
    }
}

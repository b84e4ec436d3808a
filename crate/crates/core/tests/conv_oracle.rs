mod support;

use edibnet::ops::conv2d;
use edibnet::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::fd::random;
use support::oracles::conv_reference as reference;

#[test]
fn matches_nested_loops_on_200_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..200u64 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..=k / 2);
        let cin = rng.gen_range(1..5);
        let cout = rng.gen_range(1..5);
        let n = rng.gen_range(1..3);
        let h = rng.gen_range(k.max(2)..12);
        let w = rng.gen_range(k.max(2)..12);
        let x = random(Shape::new(n, cin, h, w), 3 * case).scale(0.5);
        let wt = random(Shape::new(cout, cin, k, k), 3 * case + 1).scale(0.5);
        let b = random(Shape::new(1, cout, 1, 1), 3 * case + 2);
        let bias = (case % 2 == 0).then_some(&b);
        let got = conv2d(&x, &wt, bias, stride, pad).unwrap();
        let want = reference(&x, &wt, bias, stride, pad);
        assert_eq!(got.numel(), want.len(), "case {case}");
        for (g, r) in got.data().iter().zip(&want) {
            worst = worst.max((*g as f64 - r).abs());
        }
    }
    assert!(worst < 1e-6, "max abs error {worst:e}");
}

#[test]
fn large_plane_uses_chunks_consistently() {
    // big enough that the im2col buffer is split into row chunks
    let x = random(Shape::new(1, 3, 700, 520), 9).scale(0.5);
    let w = random(Shape::new(2, 3, 3, 3), 10).scale(0.5);
    let got = conv2d(&x, &w, None, 1, 1).unwrap();
    let want = reference(&x, &w, None, 1, 1);
    let worst = got
        .data()
        .iter()
        .zip(&want)
        .map(|(g, r)| (*g as f64 - r).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "max abs error {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_in_input(seed in 0u64..10_000, a in -2.0f32..2.0, s in 1usize..3) {
        let x1 = random(Shape::new(1, 2, 7, 6), seed);
        let x2 = random(Shape::new(1, 2, 7, 6), seed + 1);
        let w = random(Shape::new(3, 2, 3, 3), seed + 2);
        let mix = x1.scale(a).add(&x2).unwrap();
        let lhs = conv2d(&mix, &w, None, s, 1).unwrap();
        let rhs = conv2d(&x1, &w, None, s, 1).unwrap().scale(a).add(&conv2d(&x2, &w, None, s, 1).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn linear_in_weight(seed in 0u64..10_000, a in -2.0f32..2.0) {
        let x = random(Shape::new(2, 3, 5, 5), seed);
        let w1 = random(Shape::new(2, 3, 3, 3), seed + 1);
        let w2 = random(Shape::new(2, 3, 3, 3), seed + 2);
        let lhs = conv2d(&x, &w1.scale(a).add(&w2).unwrap(), None, 1, 1).unwrap();
        let rhs = conv2d(&x, &w1, None, 1, 1).unwrap().scale(a).add(&conv2d(&x, &w2, None, 1, 1).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn batch_items_are_independent(seed in 0u64..10_000) {
        let x = random(Shape::new(3, 2, 6, 5), seed);
        let w = random(Shape::new(4, 2, 3, 3), seed + 1);
        let all = conv2d(&x, &w, None, 1, 1).unwrap();
        for n in 0..3 {
            let one = conv2d(&x.slice_batch(n, 1).unwrap(), &w, None, 1, 1).unwrap();
            let part = all.slice_batch(n, 1).unwrap();
            prop_assert_eq!(one.data(), part.data());
        }
    }
}

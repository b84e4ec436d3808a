mod support;

use edibnet::autodiff::Tape;
use edibnet::model::{adapter_forward, depth_gate, forward, infer, init_params, Layers, ModelConfig, ParamStore};
use edibnet::optim::{adam_step, AdamHyper, AdamState};
use edibnet::profile::count_complexity;
use edibnet::train::loss;
use edibnet::wavelet::{dwt2, WaveletBasis};
use edibnet::{Shape, Tensor};
use proptest::prelude::*;
use support::fd::{fill_zeros, random};

fn image(n: usize, side: usize, seed: u64) -> Tensor {
    random(Shape::new(n, 3, side, side), seed).map(|v| 0.5 + 0.45 * v)
}

fn depth(n: usize, side: usize, seed: u64) -> Tensor {
    random(Shape::new(n, 1, side, side), seed).map(|v| 0.5 + 0.5 * v)
}

fn small(use_depth: bool) -> ModelConfig {
    ModelConfig {
        encoder_blocks: [1, 1, 2],
        bottleneck_blocks: 1,
        decoder_blocks: [2, 1, 1],
        ..if use_depth { ModelConfig::channel16() } else { ModelConfig::channel16_nodepth() }
    }
}

// Parameter count written out from the layer list, independent of the
// schema builder.
fn closed_form_params(cfg: &ModelConfig) -> usize {
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    let d = cfg.base_channels;
    let c = [d, 2 * d, 4 * d];
    let bands = if cfg.levels == 1 { 1 } else { 4 };
    let attn = |c: usize| conv(c, c / cfg.attention_ratio, 1) + conv(c / cfg.attention_ratio, c, 1);
    let adapter = |c: usize, prop: bool| {
        4 * c + 2 * conv(c, c, 1) + 2 * conv(c, c, 3) + conv(2 * c, c, 3) + attn(c) + if prop { attn(c) } else { 0 }
    };
    let mut n = bands * conv(3, d / bands, 3);
    for l in 0..3 {
        n += cfg.encoder_blocks[l] * 2 * conv(c[l], c[l], 3);
    }
    n += conv(c[0], c[1], 3) + conv(c[1], c[2], 3);
    n += cfg.bottleneck_blocks * 2 * conv(c[2], c[2], 3);
    if cfg.use_depth {
        n += conv(1, c[2], 3) + conv(c[2], c[2], 3);
    }
    for (i, l) in [2usize, 1, 0].into_iter().enumerate() {
        if l < 2 {
            n += conv(2 * c[l], c[l], 1);
        }
        if cfg.use_depth {
            n += adapter(c[l], l > 0);
        }
        n += cfg.decoder_blocks[i] * 2 * conv(c[l], c[l], 3);
        if l > 0 {
            n += conv(c[l], c[l - 1], 3);
            if cfg.use_depth {
                n += conv(c[l], c[l - 1], 3);
            }
        }
    }
    n + bands * conv(c[0], 3, 3)
}

#[test]
fn parameter_count_matches_closed_form() {
    for name in edibnet::model::config::PRESETS {
        let cfg = ModelConfig::preset(name).unwrap();
        let store = init_params(&cfg, 0).unwrap();
        assert_eq!(store.num_params(), closed_form_params(&cfg), "{name}");
    }
    for levels in 1..=3 {
        let cfg = ModelConfig { levels, ..small(true) };
        assert_eq!(init_params(&cfg, 0).unwrap().num_params(), closed_form_params(&cfg));
    }
}

#[test]
fn profiler_params_equal_store_params() {
    for name in edibnet::model::config::PRESETS {
        let cfg = ModelConfig::preset(name).unwrap();
        let store = init_params(&cfg, 0).unwrap();
        let rep = count_complexity(&cfg, (64, 64), (16, 16));
        assert_eq!(rep.params as usize, store.num_params(), "{name}");
        let layer_sum: u64 = rep.per_layer.iter().map(|l| l.params).sum();
        assert_eq!(layer_sum, rep.params);
    }
}

#[test]
fn flops_are_affine_in_height() {
    let cfg = ModelConfig::channel16_nodepth();
    let f = |h| count_complexity(&cfg, (h, 64), (16, 16)).flops as i64;
    let (a, b, c) = (f(64), f(128), f(192));
    assert_eq!(b - a, c - b);
}

#[test]
fn identity_at_init() {
    for cfg in [small(true), small(false)] {
        for basis in WaveletBasis::ALL {
            let cfg = ModelConfig { wavelet: basis, ..cfg.clone() };
            let store = init_params(&cfg, 3).unwrap();
            let x = image(1, 32, 4);
            let y = infer(&store, &cfg, &x, Some(&depth(1, 8, 5))).unwrap();
            assert!(x.max_abs_diff(&y).unwrap() < 1e-6, "{basis:?}");
        }
    }
}

fn trained_like(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = init_params(cfg, seed).unwrap();
    fill_zeros(&mut store, seed + 1, 0.05);
    store
}

#[test]
fn batch_equivariance() {
    let cfg = small(true);
    let store = trained_like(&cfg, 7);
    let x = image(2, 32, 8);
    let d = depth(2, 8, 9);
    let both = infer(&store, &cfg, &x, Some(&d)).unwrap();
    for n in 0..2 {
        let one = infer(&store, &cfg, &x.slice_batch(n, 1).unwrap(), Some(&d.slice_batch(n, 1).unwrap())).unwrap();
        assert!(one.max_abs_diff(&both.slice_batch(n, 1).unwrap()).unwrap() < 1e-6);
    }
}

#[test]
fn finest_details_pass_through_untouched() {
    let cfg = small(true);
    let store = trained_like(&cfg, 10);
    let x = image(1, 32, 11);
    let y = infer(&store, &cfg, &x, Some(&depth(1, 8, 12))).unwrap();
    assert!(x.max_abs_diff(&y).unwrap() > 1e-4, "heads should change the output");
    let (bx, by) = (dwt2(&x, cfg.wavelet).unwrap(), dwt2(&y, cfg.wavelet).unwrap());
    for (a, b) in [(&bx.lh, &by.lh), (&bx.hl, &by.hl), (&bx.hh, &by.hh)] {
        assert!(a.max_abs_diff(b).unwrap() < 1e-5);
    }
}

#[test]
fn depth_free_model_ignores_depth() {
    let cfg = small(false);
    let store = trained_like(&cfg, 13);
    let x = image(1, 32, 14);
    let none = infer(&store, &cfg, &x, None).unwrap();
    let a = infer(&store, &cfg, &x, Some(&depth(1, 8, 15))).unwrap();
    let b = infer(&store, &cfg, &x, Some(&depth(1, 8, 16))).unwrap();
    assert_eq!(none, a);
    assert_eq!(none, b);
}

#[test]
fn depth_model_uses_depth() {
    let cfg = small(true);
    let store = trained_like(&cfg, 17);
    let x = image(1, 32, 18);
    let a = infer(&store, &cfg, &x, Some(&depth(1, 8, 19))).unwrap();
    let b = infer(&store, &cfg, &x, Some(&depth(1, 8, 20))).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    assert!(infer(&store, &cfg, &x, None).is_err());
}

#[test]
fn every_group_receives_gradient_within_three_steps() {
    // heads and fusion convs start at zero, so the layers behind them only
    // see gradient once those have moved
    let cfg = ModelConfig::channel16();
    let mut store = init_params(&cfg, 21).unwrap();
    let sharp = image(1, 64, 22);
    let blurred = edibnet::blur::apply_blur(&sharp, &edibnet::blur::BlurKernel::new("box", 3, 3, vec![1.0; 9]).unwrap()).unwrap();
    let d = depth(1, 16, 23);
    let mut adam = AdamState::zeros_like(&store);
    let mut touched = std::collections::HashSet::new();
    for step in 1..=3 {
        let tape = Tape::new();
        let pred = forward(&Layers::new(&tape, &store), &blurred, Some(&d), &cfg).unwrap();
        let (l, _) = loss(&tape, &pred, &tape.constant(sharp.clone()), 0.1).unwrap();
        let grads = tape.backward(&l).unwrap().into_named();
        for (name, g) in &grads {
            if g.max_abs() > 0.0 {
                touched.insert(name.clone());
            }
        }
        adam_step(&mut store, grads.iter().map(|(n, g)| (n.as_str(), g)), &mut adam, 1e-3, AdamHyper::default(), step).unwrap();
    }
    for group in ["wavelet.", "encoder.", "bottleneck.", "depth.", "decoder.", "heads.", ".adapter."] {
        let members: Vec<&str> = store.names().filter(|n| n.contains(group) && n.ends_with("weight")).collect();
        if group == "bottleneck." && cfg.bottleneck_blocks == 0 {
            continue;
        }
        assert!(!members.is_empty(), "{group}");
        let live = members.iter().filter(|n| touched.contains(**n)).count();
        assert_eq!(live, members.len(), "{group}: {live}/{} weights saw gradient", members.len());
    }
}

fn adapter_store(seed: u64) -> ParamStore {
    let cfg = small(true);
    let mut store = init_params(&cfg, seed).unwrap();
    fill_zeros(&mut store, seed + 1, 0.2);
    store
}

const PREFIX: &str = "decoder.level2.adapter";

#[test]
fn adapter_is_residual_at_init() {
    let store = init_params(&small(true), 30).unwrap();
    let tape = Tape::inference();
    let layers = Layers::new(&tape, &store);
    let z = tape.constant(random(Shape::new(1, 32, 6, 6), 31));
    let d = tape.constant(random(Shape::new(1, 32, 6, 6), 32));
    let (zo, dn) = adapter_forward(&layers, PREFIX, &z, &d).unwrap();
    assert_eq!(zo.value(), z.value());
    let want = layers.channel_attention(&format!("{PREFIX}.attn_d"), &d).unwrap();
    assert_eq!(dn.unwrap().value(), want.value());
}

#[test]
fn zeroed_branches_give_half_gate() {
    let mut store = adapter_store(33);
    for b in ["branch_a", "branch_b"] {
        for p in ["weight", "bias"] {
            let t = store.get_mut(&format!("{PREFIX}.{b}.{p}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }
    let tape = Tape::inference();
    let layers = Layers::new(&tape, &store);
    let d = tape.constant(random(Shape::new(1, 32, 5, 7), 34));
    let g = depth_gate(&layers, PREFIX, &d).unwrap();
    assert!(g.value().data().iter().all(|&v| v == 0.5));
    let z = tape.constant(random(Shape::new(1, 32, 5, 7), 35));
    let a = adapter_forward(&layers, PREFIX, &z, &d).unwrap().0;
    let b = adapter_forward(&layers, PREFIX, &z, &d).unwrap().0;
    assert!(a.value().is_finite());
    assert_eq!(a.value(), b.value());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gate_is_strictly_inside_unit_interval(seed in 0u64..10_000, amp in 0.1f32..3.0) {
        let store = adapter_store(seed);
        let tape = Tape::inference();
        let d = tape.constant(random(Shape::new(1, 32, 4, 4), seed + 7).scale(amp));
        let g = depth_gate(&Layers::new(&tape, &store), PREFIX, &d).unwrap();
        prop_assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn swapping_branches_changes_nothing(seed in 0u64..10_000) {
        let store = adapter_store(seed);
        let mut swapped = store.clone();
        for p in ["weight", "bias"] {
            let a = store.get(&format!("{PREFIX}.branch_a.{p}")).unwrap().clone();
            let b = store.get(&format!("{PREFIX}.branch_b.{p}")).unwrap().clone();
            *swapped.get_mut(&format!("{PREFIX}.branch_a.{p}")).unwrap() = b;
            *swapped.get_mut(&format!("{PREFIX}.branch_b.{p}")).unwrap() = a;
        }
        let tape = Tape::inference();
        let z = tape.constant(random(Shape::new(1, 32, 4, 4), seed + 1));
        let d = tape.constant(random(Shape::new(1, 32, 4, 4), seed + 2));
        let x = adapter_forward(&Layers::new(&tape, &store), PREFIX, &z, &d).unwrap().0;
        let y = adapter_forward(&Layers::new(&tape, &swapped), PREFIX, &z, &d).unwrap().0;
        prop_assert_eq!(x.value(), y.value());
    }

    #[test]
    fn identity_holds_for_any_image(seed in 0u64..10_000, side in prop::sample::select(vec![16usize, 32, 48])) {
        let cfg = small(false);
        let store = init_params(&cfg, seed).unwrap();
        let x = image(1, side, seed + 1);
        let y = infer(&store, &cfg, &x, None).unwrap();
        prop_assert!(x.max_abs_diff(&y).unwrap() < 1e-6);
    }
}

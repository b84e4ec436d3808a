mod support;

use std::path::{Path, PathBuf};

use edibnet::blur::{load_kernel, BlurKernel};
use edibnet::io::weights::{decode_tensors, encode_tensors};
use edibnet::io::{
    crop, load_depth, load_image, load_model_weights, load_weights, pad_reflectless, save_image, save_image16,
    save_weights, DepthNorm, ImageBuffer,
};
use edibnet::model::{infer, init_params, ModelConfig};
use edibnet::train::{Checkpoint, TrainConfig};
use edibnet::optim::AdamState;
use edibnet::{Shape, Tensor};
use proptest::prelude::*;
use support::fd::random;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

#[test]
fn pixmap_fixture_decodes_exactly() {
    let want = [
        [0.0, 255.0, 0.0, 51.0],
        [0.0, 0.0, 128.0, 102.0],
        [0.0, 0.0, 255.0, 204.0],
    ];
    for file in ["pixmap_2x2.ppm", "pixmap_2x2.png"] {
        let t = load_image(&fixture(file)).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 2, 2));
        for (c, row) in want.iter().enumerate() {
            let expect: Vec<f32> = row.iter().map(|v| *v as f32 / 255.0).collect();
            assert_eq!(t.plane(0, c), &expect[..], "{file} channel {c}");
        }
    }
}

#[test]
fn depth_fixture_scales() {
    for file in ["depth_2x2.pgm", "depth_2x2.png"] {
        let raw = load_image(&fixture(file)).unwrap();
        assert_eq!(raw.data()[3], 1.0);
        let d = load_depth(&fixture(file), DepthNorm::FixedRange(10.0), 1000.0).unwrap();
        assert_eq!(d.data(), &[0.1, 0.2, 0.5, 1.0]);
        let d = load_depth(&fixture(file), DepthNorm::PerImageMax, 1000.0).unwrap();
        assert!((d.data()[0] - 1000.0 / 65535.0).abs() < 1e-7);
    }
    assert!(load_depth(&fixture("pixmap_2x2.ppm"), DepthNorm::PerImageMax, 1000.0).is_err());
}

#[test]
fn weight_fixture_decodes() {
    let store = load_weights(&fixture("weights_small.edbw")).unwrap();
    let names: Vec<&str> = store.names().collect();
    assert_eq!(names, ["a.weight", "a.bias"]);
    assert_eq!(store.get("a.weight").unwrap().data(), &[0.5, -1.0, 2.0, 0.25]);
    assert_eq!(store.get("a.bias").unwrap().data(), &[3.0]);
    // not a model layout
    assert!(load_model_weights(&fixture("weights_small.edbw"), &ModelConfig::channel16()).is_err());
}

#[test]
fn text_fixtures_parse() {
    let k = load_kernel(&fixture("kernel_3x3.txt")).unwrap();
    assert_eq!((k.h, k.w), (3, 3));
    assert_eq!(k.at(1, 1), 0.5);
    assert_eq!(k.at(0, 1), 0.125);
    let cfg = ModelConfig::load(fixture("model.cfg").to_str().unwrap()).unwrap();
    assert_eq!(cfg, ModelConfig::channel16_nodepth());
    let tc = TrainConfig::load(&fixture("train.cfg")).unwrap();
    assert_eq!((tc.epochs, tc.patch, tc.batch, tc.seed), (2, 32, 2, 7));
}

#[test]
fn half_grey_quantises_to_128() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::full(Shape::new(1, 3, 3, 5), 0.5);
    for ext in ["png", "ppm"] {
        let p = dir.path().join(format!("half.{ext}"));
        save_image(&t, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));
    }
}

#[test]
fn image_buffers_round_trip_every_format() {
    let dir = tempfile::tempdir().unwrap();
    for (channels, maxval) in [(1usize, 255u16), (3, 255), (1, 65535), (3, 65535)] {
        let samples: Vec<u16> = (0..7 * 5 * channels)
            .map(|i| ((i as u32).wrapping_mul(2654435761) % (maxval as u32 + 1)) as u16)
            .collect();
        let img = ImageBuffer { width: 7, height: 5, channels, maxval, samples };
        for ext in ["png", if channels == 1 { "pgm" } else { "ppm" }] {
            let p = dir.path().join(format!("img{channels}_{maxval}.{ext}"));
            img.write(&p).unwrap();
            assert_eq!(ImageBuffer::read(&p).unwrap(), img, "{}", p.display());
        }
    }
}

#[test]
fn saved_tensors_reload_within_half_a_level() {
    let dir = tempfile::tempdir().unwrap();
    let t = random(Shape::new(1, 3, 9, 6), 4).map(|v| 0.5 + 0.5 * v);
    let p8 = dir.path().join("a.png");
    let p16 = dir.path().join("b.png");
    save_image(&t, &p8).unwrap();
    save_image16(&t, &p16).unwrap();
    assert!(load_image(&p8).unwrap().max_abs_diff(&t).unwrap() <= 0.5 / 255.0 + 1e-7);
    assert!(load_image(&p16).unwrap().max_abs_diff(&t).unwrap() <= 0.5 / 65535.0 + 1e-7);
}

#[test]
fn truncated_and_unknown_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good = std::fs::read(fixture("pixmap_2x2.ppm")).unwrap();
    let p = dir.path().join("cut.ppm");
    std::fs::write(&p, &good[..good.len() - 2]).unwrap();
    assert!(load_image(&p).is_err());
    let q = dir.path().join("x.bmp");
    std::fs::write(&q, b"BM....").unwrap();
    assert!(load_image(&q).is_err());
    let w = std::fs::read(fixture("weights_small.edbw")).unwrap();
    assert!(decode_tensors(&w[..w.len() - 1], Path::new("w")).is_err());
}

#[test]
fn model_weights_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::channel16();
    let store = init_params(&cfg, 11).unwrap();
    let p = dir.path().join("w.edbw");
    save_weights(&store, &p).unwrap();
    assert_eq!(load_model_weights(&p, &cfg).unwrap(), store);
    assert_eq!(std::fs::read(&p).unwrap(), encode_tensors(store.iter()));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::channel16_nodepth();
    let params = init_params(&cfg, 2).unwrap();
    let mut adam = AdamState::zeros_like(&params);
    for (k, t) in adam.m.iter_mut() {
        *t = random(t.shape(), k.len() as u64);
    }
    let ck = Checkpoint { params, adam, step: 1234, config_hash: 0xfeed_beef };
    let p = dir.path().join("ck.edbw");
    ck.save(&p).unwrap();
    assert_eq!(Checkpoint::load(&p).unwrap(), ck);
}

#[test]
fn padding_then_cropping_matches_aligned_processing() {
    // the pad region only influences pixels near it when processing is local
    let cfg = ModelConfig::channel16_nodepth();
    let store = init_params(&cfg, 5).unwrap();
    let aligned = random(Shape::new(1, 3, 64, 64), 6).map(|v| 0.5 + 0.4 * v);
    let cut = aligned.crop(0, 0, 50, 57).unwrap();
    let (padded, b) = pad_reflectless(&cut, cfg.required_multiple());
    assert_eq!(padded.shape(), aligned.shape());
    let a = crop(&infer(&store, &cfg, &padded, None).unwrap(), b).unwrap();
    let r = infer(&store, &cfg, &aligned, None).unwrap().crop(0, 0, 50, 57).unwrap();
    let interior = |t: &Tensor| t.crop(0, 0, 42, 49).unwrap();
    assert!(interior(&a).max_abs_diff(&interior(&r)).unwrap() < 1e-5);

    let k = BlurKernel::new("box", 5, 5, vec![1.0; 25]).unwrap();
    let blur = |t: &Tensor| edibnet::blur::apply_blur(t, &k).unwrap();
    let a = crop(&blur(&padded), b).unwrap();
    let r = blur(&aligned).crop(0, 0, 50, 57).unwrap();
    assert!(interior(&a).max_abs_diff(&interior(&r)).unwrap() < 1e-5);
}

fn arb_store() -> impl Strategy<Value = Vec<(String, Tensor)>> {
    prop::collection::vec(("[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,3}", 1usize..4, 1usize..5, 1usize..4, 1usize..4, any::<u64>()), 0..6)
        .prop_map(|items| {
            let mut seen = std::collections::HashSet::new();
            items
                .into_iter()
                .filter(|(name, ..)| seen.insert(name.clone()))
                .map(|(name, n, c, h, w, seed)| (name, random(Shape::new(n, c, h, w), seed).scale(1e3)))
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip_is_bitwise(store in arb_store()) {
        let bytes = encode_tensors(store.iter().map(|(k, t)| (k.as_str(), t)));
        let back = decode_tensors(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for ((n1, t1), (n2, t2)) in back.iter().zip(&store) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(b1, b2);
        }
    }

    #[test]
    fn pad_then_crop_is_identity(h in 1usize..40, w in 1usize..40, m in 1usize..17, seed in 0u64..1000) {
        let x = random(Shape::new(1, 2, h, w), seed);
        let (p, b) = pad_reflectless(&x, m);
        prop_assert_eq!(p.shape().h % m, 0);
        prop_assert_eq!(p.shape().w % m, 0);
        prop_assert_eq!(crop(&p, b).unwrap(), x);
    }

    #[test]
    fn kernel_text_round_trip(hh in 0usize..3, hw in 0usize..3, seed in 0u64..1000) {
        let (h, w) = (2 * hh + 1, 2 * hw + 1);
        let taps: Vec<f32> = random(Shape::new(1, 1, h, w), seed).data().iter().map(|v| v.abs() + 0.01).collect();
        let k = BlurKernel::new("k", h, w, taps).unwrap();
        let back = BlurKernel::parse("k", &k.to_text()).unwrap();
        // renormalising an already unit-sum kernel may move the last bit
        for (a, b) in back.taps.iter().zip(&k.taps) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }
}

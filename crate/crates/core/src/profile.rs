//! Static complexity accounting and wall-clock benchmarking.
//!
//! The walker below mirrors the forward pass layer by layer without
//! allocating tensors. Cost conventions, per output element unless noted:
//!
//! | op | FLOPs |
//! |---|---|
//! | conv | `2 * c_in * c_out * kh * kw` per output site (bias not counted) |
//! | add, mul, per-channel scale | 1 |
//! | sigmoid | 3 (exp, add, divide) |
//! | silu | 4 (sigmoid plus a multiply) |
//! | channel norm | 4 per input element (mean, variance, standardise, affine) |
//! | global average pool | 1 per input element |
//! | bilinear resize | 4 |
//! | wavelet analysis / synthesis | 6 per full-resolution sample (two 2-tap passes) |
//! | nearest upsample, concat | 0 |
//!
//! `macs` counts convolution multiply-accumulates only, so `flops` is
//! `2 * macs` plus the elementwise terms.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::model::params::band_names;
use crate::model::{infer, ModelConfig, ParamStore};
use crate::tensor::{Shape, Tensor};

const BYTES: u64 = 4;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
    pub macs: u64,
    pub output_shape: [usize; 4],
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ComplexityReport {
    pub params: u64,
    pub flops: u64,
    pub macs: u64,
    pub peak_activation_bytes: u64,
    pub per_layer: Vec<LayerReport>,
}

impl ComplexityReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "params={}\nflops={}\nmacs={}\ngflops={:.3}\ngmacs={:.3}\npeak_activation_bytes={}\n",
            self.params,
            self.flops,
            self.macs,
            self.flops as f64 / 1e9,
            self.macs as f64 / 1e9,
            self.peak_activation_bytes
        );
        for l in &self.per_layer {
            let [n, c, h, w] = l.output_shape;
            s.push_str(&format!(
                "layer={} kind={} params={} flops={} macs={} shape={n}x{c}x{h}x{w}\n",
                l.name, l.kind, l.params, l.flops, l.macs
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// FLOPs of convolution layers only.
    pub fn conv_flops(&self) -> u64 {
        self.per_layer.iter().filter(|l| l.kind == "conv").map(|l| l.flops).sum()
    }
}

struct Walker {
    layers: Vec<LayerReport>,
    held: Vec<(String, u64)>,
    peak: u64,
}

fn bytes(s: Shape) -> u64 {
    s.numel() as u64 * BYTES
}

impl Walker {
    fn new() -> Self {
        Walker {
            layers: Vec::new(),
            held: Vec::new(),
            peak: 0,
        }
    }

    fn held_bytes(&self) -> u64 {
        self.held.iter().map(|(_, b)| b).sum()
    }

    fn hold(&mut self, name: &str, s: Shape) {
        self.held.push((name.to_string(), bytes(s)));
    }

    fn release(&mut self, name: &str) {
        self.held.retain(|(n, _)| n != name);
    }

    fn record(&mut self, name: &str, kind: &str, params: u64, flops: u64, macs: u64, inputs: &[Shape], out: Shape) {
        let live = self.held_bytes() + inputs.iter().map(|&s| bytes(s)).sum::<u64>() + bytes(out);
        self.peak = self.peak.max(live);
        self.layers.push(LayerReport {
            name: name.to_string(),
            kind: kind.to_string(),
            params,
            flops,
            macs,
            output_shape: out.dims(),
        });
    }

    fn conv(&mut self, name: &str, x: Shape, c_out: usize, k: usize, stride: usize) -> Shape {
        let pad = k / 2;
        let ho = (x.h + 2 * pad - k) / stride + 1;
        let wo = (x.w + 2 * pad - k) / stride + 1;
        let out = Shape::new(x.n, c_out, ho, wo);
        let params = (c_out * x.c * k * k + c_out) as u64;
        let macs = (x.c * c_out * k * k) as u64 * (x.n * ho * wo) as u64;
        self.record(name, "conv", params, 2 * macs, macs, &[x], out);
        out
    }

    fn elementwise(&mut self, name: &str, kind: &str, per_elem: u64, inputs: &[Shape], out: Shape) -> Shape {
        self.record(name, kind, 0, per_elem * out.numel() as u64, 0, inputs, out);
        out
    }

    fn norm(&mut self, name: &str, x: Shape) -> Shape {
        self.record(name, "norm", 2 * x.c as u64, 4 * x.numel() as u64, 0, &[x], x);
        x
    }

    fn residual_blocks(&mut self, prefix: &str, x: Shape, count: usize) -> Shape {
        for b in 0..count {
            let p = format!("{prefix}.block{b}");
            self.hold(&p, x);
            let h = self.conv(&format!("{p}.conv1"), x, x.c, 3, 1);
            let h = self.elementwise(&format!("{p}.silu"), "silu", 4, &[h], h);
            let h = self.conv(&format!("{p}.conv2"), h, x.c, 3, 1);
            self.release(&p);
            self.elementwise(&format!("{p}.add"), "add", 1, &[x, h], x);
        }
        x
    }

    fn attention(&mut self, prefix: &str, f: Shape, ratio: usize) -> Shape {
        let pooled = Shape::new(f.n, f.c, 1, 1);
        self.hold(prefix, f);
        self.record(&format!("{prefix}.pool"), "pool", 0, f.numel() as u64, 0, &[], pooled);
        let r = self.conv(&format!("{prefix}.reduce"), pooled, f.c / ratio, 1, 1);
        let r = self.elementwise(&format!("{prefix}.silu"), "silu", 4, &[r], r);
        let e = self.conv(&format!("{prefix}.expand"), r, f.c, 1, 1);
        let e = self.elementwise(&format!("{prefix}.sigmoid"), "sigmoid", 3, &[e], e);
        self.release(prefix);
        self.elementwise(&format!("{prefix}.scale"), "mul", 1, &[f, e], f)
    }

    fn adapter(&mut self, prefix: &str, z: Shape, ratio: usize, propagate: bool) {
        self.hold(&format!("{prefix}.z"), z);
        self.hold(&format!("{prefix}.d"), z);
        let zn = self.norm(&format!("{prefix}.norm_z"), z);
        let zn = self.conv(&format!("{prefix}.bias_z"), zn, z.c, 1, 1);
        self.hold(&format!("{prefix}.zn"), zn);
        let dn = self.norm(&format!("{prefix}.norm_d"), z);
        let dn = self.conv(&format!("{prefix}.bias_d"), dn, z.c, 1, 1);
        self.hold(&format!("{prefix}.dn"), dn);
        let a = self.conv(&format!("{prefix}.branch_a"), dn, z.c, 3, 1);
        self.hold(&format!("{prefix}.a"), a);
        let b = self.conv(&format!("{prefix}.branch_b"), dn, z.c, 3, 1);
        self.release(&format!("{prefix}.dn"));
        self.release(&format!("{prefix}.a"));
        let g = self.elementwise(&format!("{prefix}.product"), "mul", 1, &[a, b], z);
        let g = self.elementwise(&format!("{prefix}.gate"), "sigmoid", 3, &[g], g);
        self.release(&format!("{prefix}.zn"));
        let zc = self.elementwise(&format!("{prefix}.condition"), "mul", 1, &[g, zn], z);
        let cat = self.elementwise(&format!("{prefix}.concat"), "concat", 0, &[zc], z.with_c(2 * z.c));
        let f = self.conv(&format!("{prefix}.fusion"), cat, z.c, 3, 1);
        let f = self.attention(&format!("{prefix}.attn"), f, ratio);
        self.release(&format!("{prefix}.z"));
        self.elementwise(&format!("{prefix}.residual"), "add", 1, &[z, f], z);
        self.release(&format!("{prefix}.d"));
        if propagate {
            self.attention(&format!("{prefix}.attn_d"), z, ratio);
        }
    }
}

/// Walk the architecture for a single image of `image_hw` (and a depth map
/// of `depth_hw` when the config uses depth).
pub fn count_complexity(cfg: &ModelConfig, image_hw: (usize, usize), depth_hw: (usize, usize)) -> ComplexityReport {
    let mut w = Walker::new();
    let ch = cfg.level_channels();
    let (h, wd) = image_hw;
    let img = Shape::new(1, 3, h, wd);

    // analysis pyramid; every level's details are kept for synthesis
    let mut cur = img;
    for k in 1..=cfg.levels {
        let half = Shape::new(1, 3, cur.h / 2, cur.w / 2);
        w.record(&format!("dwt.level{k}"), "dwt", 0, 6 * cur.numel() as u64, 0, &[cur], half.with_c(12));
        w.hold(&format!("details{k}"), half.with_c(9));
        cur = half;
    }
    let top = cur;
    w.hold("top_ll", top);
    let bands = band_names(cfg.levels);
    let mut feat_c = 0;
    for band in bands {
        let o = w.conv(&format!("wavelet.{band}"), top, ch[0] / bands.len(), 3, 1);
        feat_c += o.c;
    }
    let mut z = top.with_c(feat_c);

    let mut skips = Vec::new();
    for l in 0..3 {
        z = w.residual_blocks(&format!("encoder.level{}", l + 1), z, cfg.encoder_blocks[l]);
        if l < 2 {
            w.hold(&format!("skip{}", l + 1), z);
            skips.push(z);
            z = w.conv(&format!("encoder.down{}", l + 1), z, ch[l + 1], 3, 2);
        }
    }
    z = w.residual_blocks("bottleneck", z, cfg.bottleneck_blocks);

    let mut d = None;
    if cfg.use_depth {
        w.hold("deepest", z);
        let dm = Shape::new(1, 1, depth_hw.0, depth_hw.1);
        let e = w.conv("depth.conv1", dm, ch[2], 3, 1);
        let e = w.elementwise("depth.silu", "silu", 4, &[e], e);
        let e = w.conv("depth.conv2", e, ch[2], 3, 1);
        d = Some(w.elementwise("depth.resize", "resize", 4, &[e], z));
        w.release("deepest");
    }

    for (i, l) in (0..3).rev().enumerate() {
        let prefix = format!("decoder.level{}", l + 1);
        if l < 2 {
            let skip = skips[l];
            w.release(&format!("skip{}", l + 1));
            let cat = w.elementwise(&format!("{prefix}.concat"), "concat", 0, &[z, skip], z.with_c(z.c + skip.c));
            z = w.conv(&format!("{prefix}.fuse"), cat, ch[l], 1, 1);
        }
        if let Some(ds) = d {
            w.adapter(&format!("{prefix}.adapter"), z, cfg.attention_ratio, l > 0);
            if l > 0 {
                w.hold("depth", ds);
            }
        }
        z = w.residual_blocks(&prefix, z, cfg.decoder_blocks[i]);
        if l > 0 {
            let up = w.elementwise(&format!("{prefix}.upsample"), "upsample", 0, &[z], z.with_hw(2 * z.h, 2 * z.w));
            z = w.conv(&format!("{prefix}.up"), up, ch[l - 1], 3, 1);
            if let Some(ds) = d {
                w.hold("features", z);
                w.release("depth");
                let up = w.elementwise(
                    &format!("{prefix}.depth_upsample"),
                    "upsample",
                    0,
                    &[ds],
                    ds.with_hw(2 * ds.h, 2 * ds.w),
                );
                d = Some(w.conv(&format!("{prefix}.depth_prop"), up, ch[l - 1], 3, 1));
                w.release("features");
            }
        }
    }

    w.hold("decoded", z);
    for band in bands {
        let p = w.conv(&format!("heads.{band}"), z, 3, 3, 1);
        w.elementwise(&format!("heads.{band}.residual"), "add", 1, &[p, top], top);
    }
    w.release("decoded");
    w.release("top_ll");
    let mut cur = top;
    for k in (1..=cfg.levels).rev() {
        w.release(&format!("details{k}"));
        let full = Shape::new(1, 3, cur.h * 2, cur.w * 2);
        w.record(&format!("idwt.level{k}"), "idwt", 0, 6 * full.numel() as u64, 0, &[cur.with_c(12)], full);
        cur = full;
    }

    let params = w.layers.iter().map(|l| l.params).sum();
    let flops = w.layers.iter().map(|l| l.flops).sum();
    let macs = w.layers.iter().map(|l| l.macs).sum();
    ComplexityReport {
        params,
        flops,
        macs,
        peak_activation_bytes: w.peak,
        per_layer: w.layers,
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BenchStats {
    pub median_s: f64,
    pub iqr_s: f64,
    pub samples: Vec<f64>,
    pub threads: usize,
}

/// Time `repeats` inference passes after one warm-up run on a fixed
/// synthetic input. Kernels are single-threaded.
pub fn benchmark_forward(
    cfg: &ModelConfig,
    store: &ParamStore,
    image_hw: (usize, usize),
    depth_hw: (usize, usize),
    repeats: usize,
) -> Result<BenchStats> {
    let (h, w) = image_hw;
    let image = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        0.5 + 0.4 * ((x as f32 * 0.05 + c as f32).sin() * (y as f32 * 0.03).cos())
    });
    let depth = Tensor::from_fn(Shape::new(1, 1, depth_hw.0, depth_hw.1), |_, _, y, _| {
        (y as f32 + 1.0) / depth_hw.0 as f32
    });
    let depth = cfg.use_depth.then_some(&depth);
    infer(store, cfg, &image, depth)?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let out = infer(store, cfg, &image, depth)?;
        samples.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchStats {
        median_s: quantile(&sorted, 0.5),
        iqr_s: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        samples,
        threads: 1,
    })
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

//! Desk-scale training: random blurred patches, L1 + cosine loss, Adam with
//! a cosine learning-rate schedule, and resumable checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::blur::{apply_blur, choose_kernel, KernelBank};
use crate::error::{Error, Result};
use crate::io::weights::{decode_tensors, encode_tensors};
use crate::io::{load_depth, load_rgb, load_weights, DepthNorm};
use crate::metrics::psnr;
use crate::model::config::key_values;
use crate::model::{forward, infer, init_params, schema, Layers, ModelConfig, ParamStore};
use crate::optim::{adam_step, cosine_lr, AdamHyper, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub epochs: usize,
    pub patch: usize,
    pub batch: usize,
    /// Weight of the cosine term.
    pub cosine_weight: f32,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Rescale gradients whose global L2 norm exceeds this (0 disables).
    pub clip_grad_norm: f32,
    /// Linear ramp of the learning rate over the first steps (0 disables).
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            patch: 256,
            batch: 4,
            cosine_weight: 0.1,
            seed: 0,
            checkpoint_every: 1,
            clip_grad_norm: 0.0,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr0 >= 0.0) {
            return Err(Error::Config(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        if !(self.clip_grad_norm >= 0.0) {
            return Err(Error::Config(format!("clip_grad_norm must be >= 0, got {}", self.clip_grad_norm)));
        }
        if !(self.cosine_weight >= 0.0) {
            return Err(Error::Config(format!("cosine_weight must be >= 0, got {}", self.cosine_weight)));
        }
        let m = model.required_multiple();
        if self.patch == 0 || self.patch % m != 0 {
            return Err(Error::Config(format!("patch {} must be a positive multiple of {m}", self.patch)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (lineno, key, value) in key_values(text)? {
            let bad = || Error::Config(format!("line {lineno}: {key}: invalid value '{value}'"));
            match key {
                "lr0" | "lr" => c.lr0 = value.parse().map_err(|_| bad())?,
                "beta1" => c.beta1 = value.parse().map_err(|_| bad())?,
                "beta2" => c.beta2 = value.parse().map_err(|_| bad())?,
                "eps" => c.eps = value.parse().map_err(|_| bad())?,
                "epochs" => c.epochs = value.parse().map_err(|_| bad())?,
                "patch" => c.patch = value.parse().map_err(|_| bad())?,
                "batch" => c.batch = value.parse().map_err(|_| bad())?,
                "cosine_weight" | "lambda" => c.cosine_weight = value.parse().map_err(|_| bad())?,
                "seed" => c.seed = value.parse().map_err(|_| bad())?,
                "checkpoint_every" => c.checkpoint_every = value.parse().map_err(|_| bad())?,
                "clip_grad_norm" => c.clip_grad_norm = value.parse().map_err(|_| bad())?,
                "warmup_steps" => c.warmup_steps = value.parse().map_err(|_| bad())?,
                // tolerated so a model and train config can share a file
                _ if is_model_key(key) => {}
                _ => return Err(Error::Config(format!("line {lineno}: unknown key '{key}'"))),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr0 = {:e}", self.lr0);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "eps = {:e}", self.eps);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "cosine_weight = {}", self.cosine_weight);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "clip_grad_norm = {}", self.clip_grad_norm);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        s
    }

    /// Stable 64-bit digest of the configuration text.
    pub fn hash(&self) -> u64 {
        let d = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Learning rate at `step`: cosine annealing, scaled by the warmup ramp.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        let lr = cosine_lr(step, total_steps, self.lr0);
        if step < self.warmup_steps {
            lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            lr
        }
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

fn is_model_key(key: &str) -> bool {
    matches!(
        key,
        "preset"
            | "base_channels"
            | "levels"
            | "wavelet"
            | "use_depth"
            | "encoder_blocks"
            | "bottleneck_blocks"
            | "decoder_blocks"
            | "attention_ratio"
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub cosine: f64,
    pub total: f64,
}

/// `mean|pred - target| + lambda * (1 - cos)`, where `cos` is the batch mean
/// of per-sample cosine similarity of the flattened tensors.
pub fn loss(tape: &Tape, pred: &Var, target: &Var, lambda: f32) -> Result<(Var, LossTerms)> {
    let l1 = tape.l1_loss(pred, target)?;
    let cos = tape.cosine_similarity(pred, target)?;
    let one_minus = tape.offset(&tape.scale(&cos, -1.0), 1.0);
    let total = tape.add(&l1, &tape.scale(&one_minus, lambda))?;
    let terms = LossTerms {
        l1: l1.value().data()[0] as f64,
        cosine: one_minus.value().data()[0] as f64,
        total: total.value().data()[0] as f64,
    };
    Ok((total, terms))
}

/// Loss value without gradients.
pub fn loss_value(pred: &Tensor, target: &Tensor, lambda: f32) -> Result<LossTerms> {
    let tape = Tape::inference();
    let (_, terms) = loss(&tape, &tape.constant(pred.clone()), &tape.constant(target.clone()), lambda)?;
    Ok(terms)
}

/// Top-left corner of a uniformly drawn `patch x patch` window.
pub fn sample_offset(h: usize, w: usize, patch: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if h < patch || w < patch {
        return Err(Error::shape(format!("image {h}x{w} is smaller than patch {patch}")));
    }
    Ok((rng.gen_range(0..=h - patch), rng.gen_range(0..=w - patch)))
}

/// Side of the depth patch matching a `patch`-pixel image window: the
/// proportional size rounded to a multiple of 4 (at least 4).
pub fn depth_patch_side(patch: usize, image_side: usize, depth_side: usize) -> usize {
    let exact = patch as f64 * depth_side as f64 / image_side as f64;
    (((exact / 4.0).round() as usize) * 4).max(4)
}

/// Bilinear resample of the region `[y0, y0+rh) x [x0, x0+rw)` (in pixel
/// units, fractional allowed) to `out_h x out_w`.
fn resample_region(x: &Tensor, y0: f64, x0: f64, rh: f64, rw: f64, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let coord = |o: usize, start: f64, extent: f64, out: usize, n: usize| {
        let c = (start + (o as f64 + 0.5) * extent / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(n - 1), (c - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| coord(o, y0, rh, out_h, s.h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| coord(o, x0, rw, out_w, s.w)).collect();
    Tensor::from_fn(s.with_hw(out_h, out_w), |n, c, oy, ox| {
        let (a0, a1, fy) = ys[oy];
        let (b0, b1, fx) = xs[ox];
        let top = x.at(n, c, a0, b0) + (x.at(n, c, a0, b1) - x.at(n, c, a0, b0)) * fx;
        let bot = x.at(n, c, a1, b0) + (x.at(n, c, a1, b1) - x.at(n, c, a1, b0)) * fx;
        top + (bot - top) * fy
    })
}

/// Depth crop covering the same physical region as the image window at
/// `(y, x)`.
pub fn crop_depth(depth: &Tensor, image_hw: (usize, usize), y: usize, x: usize, patch: usize) -> Tensor {
    let d = depth.shape();
    let (sy, sx) = (d.h as f64 / image_hw.0 as f64, d.w as f64 / image_hw.1 as f64);
    let out_h = depth_patch_side(patch, image_hw.0, d.h);
    let out_w = depth_patch_side(patch, image_hw.1, d.w);
    resample_region(depth, y as f64 * sy, x as f64 * sx, patch as f64 * sy, patch as f64 * sx, out_h, out_w)
}

/// A random aligned crop of the image and the matching depth crop.
pub fn sample_patch(
    image: &Tensor,
    depth: Option<&Tensor>,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Option<Tensor>)> {
    let s = image.shape();
    let (y, x) = sample_offset(s.h, s.w, patch, rng)?;
    let img = image.crop(y, x, patch, patch)?;
    Ok((img, depth.map(|d| crop_depth(d, (s.h, s.w), y, x, patch))))
}

/// One training image with its optional depth map.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub depth: Option<Tensor>,
}

/// Load `dir/rgb/*` and, when present, `dir/depth/<same stem>.*`.
pub fn load_dataset(dir: &Path, norm: DepthNorm, units_per_metre: f32) -> Result<Vec<Sample>> {
    let rgb_dir = dir.join("rgb");
    let depth_dir = dir.join("depth");
    let images = list_images(&rgb_dir)?;
    let depth_files = if depth_dir.is_dir() { list_images(&depth_dir)? } else { Vec::new() };
    let mut out = Vec::new();
    for path in images {
        let stem = file_stem(&path);
        let depth = match depth_files.iter().find(|p| file_stem(p) == stem) {
            Some(p) => Some(load_depth(p, norm, units_per_metre)?),
            None if !depth_files.is_empty() => {
                return Err(Error::format(&depth_dir, format!("no depth map for image '{stem}'")));
            }
            None => None,
        };
        out.push(Sample {
            name: stem,
            image: load_rgb(&path)?,
            depth,
        });
    }
    Ok(out)
}

pub(crate) fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Image files (`png`, `ppm`, `pgm`, `pnm`) in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut v = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "ppm" | "pgm" | "pnm")) {
            v.push(p);
        }
    }
    if v.is_empty() {
        return Err(Error::format(dir, "no images found"));
    }
    v.sort();
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub l1: f64,
    pub cosine: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Parameters, optimiser moments and the position in the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    pub config_hash: u64,
}

const SIDECAR_MAGIC: &[u8; 4] = b"EDBO";
const SIDECAR_VERSION: u32 = 1;

/// Path of the optimiser sidecar written next to a weight file.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

impl Checkpoint {
    /// Write the weights to `path` and the optimiser state to its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::save_weights(&self.params, path)?;
        let mut side = Vec::new();
        side.extend_from_slice(SIDECAR_MAGIC);
        side.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        side.extend_from_slice(&self.step.to_le_bytes());
        side.extend_from_slice(&self.config_hash.to_le_bytes());
        let names: Vec<(String, &Tensor)> = self
            .adam
            .m
            .iter()
            .map(|(k, t)| (format!("m.{k}"), t))
            .chain(self.adam.v.iter().map(|(k, t)| (format!("v.{k}"), t)))
            .collect();
        side.extend(encode_tensors(names.iter().map(|(k, t)| (k.as_str(), *t))));
        let sp = sidecar_path(path);
        std::fs::write(&sp, side).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = load_weights(path)?;
        let sp = sidecar_path(path);
        let bytes = std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
        if bytes.len() < 24 || &bytes[..4] != SIDECAR_MAGIC {
            return Err(Error::format(&sp, "not an optimiser sidecar"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != SIDECAR_VERSION {
            return Err(Error::format(&sp, format!("unsupported sidecar version {version}")));
        }
        let step = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let config_hash = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let mut adam = AdamState::default();
        for (name, t) in decode_tensors(&bytes[24..], &sp)? {
            match name.split_once('.') {
                Some(("m", k)) => adam.m.insert(k.to_string(), t),
                Some(("v", k)) => adam.v.insert(k.to_string(), t),
                _ => return Err(Error::format(&sp, format!("unexpected entry '{name}'"))),
            };
        }
        Ok(Checkpoint {
            params,
            adam,
            step,
            config_hash,
        })
    }
}

/// Stateful training loop. Batch composition at step `s` depends only on
/// the seed and `s`, so a resumed run replays the same stream.
pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    dataset: &'a [Sample],
    bank: &'a KernelBank,
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    blurred: HashMap<(usize, usize), Tensor>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ModelConfig, config: TrainConfig, dataset: &'a [Sample], bank: &'a KernelBank) -> Result<Self> {
        let params = init_params(&model, config.seed)?;
        Self::with_state(model, config, dataset, bank, params, None, 0)
    }

    pub fn resume(
        model: ModelConfig,
        config: TrainConfig,
        dataset: &'a [Sample],
        bank: &'a KernelBank,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        if ckpt.config_hash != config.hash() {
            return Err(Error::Config("checkpoint was written with a different training config".into()));
        }
        ckpt.params.check_against(&schema(&model))?;
        Self::with_state(model, config, dataset, bank, ckpt.params, Some(ckpt.adam), ckpt.step)
    }

    fn with_state(
        model: ModelConfig,
        config: TrainConfig,
        dataset: &'a [Sample],
        bank: &'a KernelBank,
        params: ParamStore,
        adam: Option<AdamState>,
        step: u64,
    ) -> Result<Self> {
        model.validate()?;
        config.validate(&model)?;
        if dataset.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if model.use_depth {
            if let Some(s) = dataset.iter().find(|s| s.depth.is_none()) {
                return Err(Error::Config(format!("model uses depth but '{}' has no depth map", s.name)));
            }
        }
        let adam = adam.unwrap_or_else(|| AdamState::zeros_like(&params));
        Ok(Trainer {
            model,
            config,
            dataset,
            bank,
            params,
            adam,
            step,
            blurred: HashMap::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset.len().div_ceil(self.config.batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    fn blurred(&mut self, idx: usize, kernel: usize) -> Result<&Tensor> {
        if !self.blurred.contains_key(&(idx, kernel)) {
            let b = apply_blur(&self.dataset[idx].image, self.bank.get(kernel))?;
            self.blurred.insert((idx, kernel), b);
        }
        Ok(&self.blurred[&(idx, kernel)])
    }

    /// Assemble the batch for the current step.
    fn batch(&mut self) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step);
        let patch = self.config.patch;
        let (mut xs, mut ys, mut ds) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..self.config.batch {
            let idx = rng.gen_range(0..self.dataset.len());
            let kernel = choose_kernel(self.bank, rng.gen());
            let s = self.dataset[idx].image.shape();
            let (y, x) = sample_offset(s.h, s.w, patch, &mut rng)?;
            let sharp = self.dataset[idx].image.crop(y, x, patch, patch)?;
            let blurred = self.blurred(idx, kernel)?.crop(y, x, patch, patch)?;
            if self.model.use_depth {
                let d = self.dataset[idx].depth.as_ref().expect("checked in constructor");
                ds.push(crop_depth(d, (s.h, s.w), y, x, patch));
            }
            xs.push(blurred);
            ys.push(sharp);
        }
        let depth = if ds.is_empty() { None } else { Some(Tensor::concat_batch(&ds)?) };
        Ok((Tensor::concat_batch(&xs)?, Tensor::concat_batch(&ys)?, depth))
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let (input, target, depth) = self.batch()?;
        let lr = self.config.lr_at(self.step, self.total_steps());
        let tape = Tape::new();
        let layers = Layers::new(&tape, &self.params);
        let pred = forward(&layers, &input, depth.as_ref(), &self.model)?;
        let (total, terms) = loss(&tape, &pred, &tape.constant(target), self.config.cosine_weight)?;
        if !terms.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: lr {lr:e}, l1 {}, cosine {}",
                self.step, terms.l1, terms.cosine
            )));
        }
        let mut grads = tape.backward(&total)?.into_named();
        let grad_norm = grads.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt();
        let clip = self.config.clip_grad_norm as f64;
        if clip > 0.0 && grad_norm > clip {
            let k = (clip / grad_norm) as f32;
            for (_, g) in grads.iter_mut() {
                *g = g.scale(k);
            }
        }
        adam_step(
            &mut self.params,
            grads.iter().map(|(n, g)| (n.as_str(), g)),
            &mut self.adam,
            lr as f32,
            self.config.hyper(),
            self.step + 1,
        )?;
        let rec = StepRecord {
            step: self.step,
            lr,
            l1: terms.l1,
            cosine: terms.cosine,
            total: terms.total,
            grad_norm,
        };
        self.step += 1;
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            config_hash: self.config.hash(),
        }
    }

    /// Run to the end of the schedule. `on_epoch` receives the epoch number
    /// (from 1) whenever a checkpoint is due.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepRecord),
        mut on_epoch: impl FnMut(usize, &Checkpoint) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut curve = Vec::new();
        let per_epoch = self.steps_per_epoch();
        while self.step < self.total_steps() {
            let rec = self.step()?;
            on_step(&rec);
            curve.push(rec);
            if self.step % per_epoch == 0 {
                let epoch = (self.step / per_epoch) as usize;
                let every = self.config.checkpoint_every;
                if every > 0 && (epoch % every == 0 || self.step == self.total_steps()) {
                    on_epoch(epoch, &self.checkpoint())?;
                }
            }
        }
        Ok(curve)
    }
}

/// Train from scratch and return the final checkpoint and the loss curve.
pub fn train(
    dataset: &[Sample],
    model: &ModelConfig,
    config: &TrainConfig,
    bank: &KernelBank,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut t = Trainer::new(model.clone(), config.clone(), dataset, bank)?;
    let curve = t.run(|_| {}, |_, _| Ok(()))?;
    Ok((t.checkpoint(), curve))
}

pub fn curve_csv(curve: &[StepRecord]) -> String {
    let mut s = String::from("step,lr,l1,cosine,total\n");
    for r in curve {
        let _ = writeln!(s, "{},{:e},{},{},{}", r.step, r.lr, r.l1, r.cosine, r.total);
    }
    s
}

/// Mean PSNR over every (image, kernel) combination of a training set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScores {
    pub blurred_psnr: f64,
    pub restored_psnr: f64,
    pub pairs: usize,
}

pub fn evaluate_pairs(store: &ParamStore, model: &ModelConfig, dataset: &[Sample], bank: &KernelBank) -> Result<PairScores> {
    let (mut b, mut r, mut n) = (0.0, 0.0, 0);
    for s in dataset {
        for k in bank.iter() {
            let blurred = apply_blur(&s.image, k)?;
            let out = infer(store, model, &blurred, s.depth.as_ref())?;
            b += psnr(&blurred, &s.image, 1.0)?;
            r += psnr(&out.map(|v| v.clamp(0.0, 1.0)), &s.image, 1.0)?;
            n += 1;
        }
    }
    Ok(PairScores {
        blurred_psnr: b / n as f64,
        restored_psnr: r / n as f64,
        pairs: n,
    })
}

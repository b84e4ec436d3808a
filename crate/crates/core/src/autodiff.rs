//! Minimal reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every primitive applied to tracked [`Var`]s in
//! execution order, so a single reverse sweep over the record visits
//! operations in reverse topological order. A tape is built per forward pass
//! and dropped afterwards. An inference tape records nothing and lets
//! intermediates be freed as soon as their last `Var` handle goes away.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, activation, conv, norm, spatial};
use crate::tensor::{Shape, Tensor};
use crate::wavelet::{self, SubbandSet, WaveletBasis};

/// A tensor value, optionally tied to a node on the tape that produced it.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

type Parent = Option<usize>;

enum Op {
    Leaf,
    Conv {
        x: Rc<Tensor>,
        w: Rc<Tensor>,
        px: Parent,
        pw: Parent,
        pb: Parent,
        stride: usize,
        padding: usize,
    },
    Silu {
        x: Rc<Tensor>,
        p: Parent,
    },
    Sigmoid {
        y: Rc<Tensor>,
        p: Parent,
    },
    Add(Parent, Parent),
    Sub(Parent, Parent),
    Mul {
        a: Rc<Tensor>,
        b: Rc<Tensor>,
        pa: Parent,
        pb: Parent,
    },
    Scale(f32, Parent),
    Offset(Parent),
    MulChannel {
        x: Rc<Tensor>,
        g: Rc<Tensor>,
        px: Parent,
        pg: Parent,
    },
    Concat {
        channels: Vec<usize>,
        parents: Vec<Parent>,
    },
    Slice {
        start: usize,
        in_shape: Shape,
        p: Parent,
    },
    Gap {
        in_shape: Shape,
        p: Parent,
    },
    Upsample(Parent),
    Resize {
        in_shape: Shape,
        p: Parent,
    },
    Norm {
        scale: Rc<Tensor>,
        stats: norm::NormStats,
        px: Parent,
        pscale: Parent,
        pshift: Parent,
    },
    Dwt {
        basis: WaveletBasis,
        p: Parent,
    },
    Idwt {
        basis: WaveletBasis,
        p: Parent,
    },
    Sum {
        in_shape: Shape,
        p: Parent,
    },
    L1 {
        pred: Rc<Tensor>,
        target: Rc<Tensor>,
        pp: Parent,
        pt: Parent,
    },
    Cosine {
        pred: Rc<Tensor>,
        target: Rc<Tensor>,
        pp: Parent,
        pt: Parent,
    },
}

struct Node {
    op: Op,
    shape: Shape,
}

/// Guard added to the cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Default)]
struct Record {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
}

pub struct Tape {
    recording: bool,
    record: RefCell<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape for training.
    pub fn new() -> Self {
        Tape {
            recording: true,
            record: RefCell::new(Record::default()),
        }
    }

    /// A tape that records nothing (inference).
    pub fn inference() -> Self {
        Tape {
            recording: false,
            record: RefCell::new(Record::default()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.record.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, any_tracked: bool) -> Var {
        if !self.recording || !any_tracked {
            return Var {
                value: Rc::new(value),
                node: None,
            };
        }
        let mut rec = self.record.borrow_mut();
        rec.nodes.push(Node {
            op,
            shape: value.shape(),
        });
        Var {
            value: Rc::new(value),
            node: Some(rec.nodes.len() - 1),
        }
    }

    /// An untracked value (no gradient flows into it).
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    /// A named learnable input. Repeated calls with the same name return the
    /// same variable.
    pub fn leaf(&self, name: &str, value: &Tensor) -> Var {
        if let Some(v) = self.record.borrow().params.get(name) {
            return v.clone();
        }
        let var = if self.recording {
            self.push(Op::Leaf, value.clone(), true)
        } else {
            self.constant(value.clone())
        };
        let mut rec = self.record.borrow_mut();
        rec.params.insert(name.to_string(), var.clone());
        rec.param_order.push(name.to_string());
        var
    }

    /// Look up a previously registered leaf.
    pub fn get_leaf(&self, name: &str) -> Option<Var> {
        self.record.borrow().params.get(name).cloned()
    }

    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(&x.value, &w.value, b.map(|b| b.value()), stride, padding)?;
        let pb = b.and_then(|b| b.node);
        let tracked = x.node.is_some() || w.node.is_some() || pb.is_some();
        Ok(self.push(
            Op::Conv {
                x: x.value.clone(),
                w: w.value.clone(),
                px: x.node,
                pw: w.node,
                pb,
                stride,
                padding,
            },
            out,
            tracked,
        ))
    }

    pub fn silu(&self, x: &Var) -> Var {
        let out = ops::silu(&x.value);
        self.push(Op::Silu { x: x.value.clone(), p: x.node }, out, x.node.is_some())
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        let out = Rc::new(ops::sigmoid(&x.value));
        let var = self.push(
            Op::Sigmoid {
                y: out.clone(),
                p: x.node,
            },
            (*out).clone(),
            x.node.is_some(),
        );
        var
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value.add(&b.value)?;
        Ok(self.push(Op::Add(a.node, b.node), out, a.node.is_some() || b.node.is_some()))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value.sub(&b.value)?;
        Ok(self.push(Op::Sub(a.node, b.node), out, a.node.is_some() || b.node.is_some()))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value.mul(&b.value)?;
        Ok(self.push(
            Op::Mul {
                a: a.value.clone(),
                b: b.value.clone(),
                pa: a.node,
                pb: b.node,
            },
            out,
            a.node.is_some() || b.node.is_some(),
        ))
    }

    pub fn scale(&self, x: &Var, s: f32) -> Var {
        self.push(Op::Scale(s, x.node), x.value.scale(s), x.node.is_some())
    }

    /// `x + c` elementwise for a constant `c`.
    pub fn offset(&self, x: &Var, c: f32) -> Var {
        self.push(Op::Offset(x.node), x.value.map(|v| v + c), x.node.is_some())
    }

    pub fn mul_channel(&self, x: &Var, gate: &Var) -> Result<Var> {
        let out = spatial::mul_channel(&x.value, &gate.value)?;
        Ok(self.push(
            Op::MulChannel {
                x: x.value.clone(),
                g: gate.value.clone(),
                px: x.node,
                pg: gate.node,
            },
            out,
            x.node.is_some() || gate.node.is_some(),
        ))
    }

    pub fn concat_channels(&self, parts: &[&Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let out = spatial::concat_channels(&vals)?;
        let tracked = parts.iter().any(|p| p.node.is_some());
        Ok(self.push(
            Op::Concat {
                channels: parts.iter().map(|p| p.shape().c).collect(),
                parents: parts.iter().map(|p| p.node).collect(),
            },
            out,
            tracked,
        ))
    }

    pub fn slice_channels(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let out = x.value.slice_channels(start, len)?;
        Ok(self.push(
            Op::Slice {
                start,
                in_shape: x.shape(),
                p: x.node,
            },
            out,
            x.node.is_some(),
        ))
    }

    pub fn global_avg_pool(&self, x: &Var) -> Result<Var> {
        let out = spatial::global_avg_pool(&x.value)?;
        Ok(self.push(
            Op::Gap {
                in_shape: x.shape(),
                p: x.node,
            },
            out,
            x.node.is_some(),
        ))
    }

    pub fn upsample_nearest2x(&self, x: &Var) -> Var {
        let out = spatial::upsample_nearest2x(&x.value);
        self.push(Op::Upsample(x.node), out, x.node.is_some())
    }

    pub fn resize_bilinear(&self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let out = spatial::resize_bilinear(&x.value, h, w)?;
        Ok(self.push(
            Op::Resize {
                in_shape: x.shape(),
                p: x.node,
            },
            out,
            x.node.is_some(),
        ))
    }

    pub fn channel_norm(&self, x: &Var, scale: &Var, shift: &Var) -> Result<Var> {
        let (out, stats) = norm::channel_norm(&x.value, &scale.value, &shift.value)?;
        let tracked = x.node.is_some() || scale.node.is_some() || shift.node.is_some();
        Ok(self.push(
            Op::Norm {
                scale: scale.value.clone(),
                stats,
                px: x.node,
                pscale: scale.node,
                pshift: shift.node,
            },
            out,
            tracked,
        ))
    }

    /// Single-level DWT with the four sub-bands packed along channels
    /// (LL, LH, HL, HH).
    pub fn dwt2(&self, x: &Var, basis: WaveletBasis) -> Result<Var> {
        let out = wavelet::dwt2(&x.value, basis)?.pack()?;
        Ok(self.push(Op::Dwt { basis, p: x.node }, out, x.node.is_some()))
    }

    /// Inverse of [`Tape::dwt2`] on a packed sub-band tensor.
    pub fn idwt2(&self, packed: &Var, basis: WaveletBasis) -> Result<Var> {
        let out = wavelet::idwt2(&SubbandSet::unpack(&packed.value)?, basis)?;
        Ok(self.push(Op::Idwt { basis, p: packed.node }, out, packed.node.is_some()))
    }

    /// Sum of all elements as a `1x1x1x1` tensor.
    pub fn sum(&self, x: &Var) -> Var {
        let out = Tensor::scalar(x.value.sum() as f32);
        self.push(
            Op::Sum {
                in_shape: x.shape(),
                p: x.node,
            },
            out,
            x.node.is_some(),
        )
    }

    /// `mean |pred - target|` over all elements.
    pub fn l1_loss(&self, pred: &Var, target: &Var) -> Result<Var> {
        pred.value.expect_same_shape(&target.value, "l1_loss")?;
        let n = pred.value.numel().max(1) as f64;
        let s: f64 = pred
            .value
            .data()
            .iter()
            .zip(target.value.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        Ok(self.push(
            Op::L1 {
                pred: pred.value.clone(),
                target: target.value.clone(),
                pp: pred.node,
                pt: target.node,
            },
            Tensor::scalar((s / n) as f32),
            pred.node.is_some() || target.node.is_some(),
        ))
    }

    /// Batch mean of per-sample cosine similarity between flattened samples.
    /// A zero vector has similarity 0.
    pub fn cosine_similarity(&self, pred: &Var, target: &Var) -> Result<Var> {
        pred.value.expect_same_shape(&target.value, "cosine_similarity")?;
        let nb = pred.shape().n;
        let mut total = 0.0f64;
        for n in 0..nb {
            total += cosine_parts(pred.value.sample(n), target.value.sample(n)).cos;
        }
        Ok(self.push(
            Op::Cosine {
                pred: pred.value.clone(),
                target: target.value.clone(),
                pp: pred.node,
                pt: target.node,
            },
            Tensor::scalar((total / nb.max(1) as f64) as f32),
            pred.node.is_some() || target.node.is_some(),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got {}",
                loss.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::Tape("loss was not recorded on this tape".into()))?;
        let rec = self.record.borrow();
        if root >= rec.nodes.len() {
            return Err(Error::Tape("loss does not belong to this tape".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..rec.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(rec.nodes[root].shape, 1.0));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &rec.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv {
                    x,
                    w,
                    px,
                    pw,
                    pb,
                    stride,
                    padding,
                } => {
                    let cg = conv::conv2d_backward(x, w, &g, *stride, *padding, px.is_some())?;
                    if let (Some(p), Some(gx)) = (px, cg.input) {
                        accumulate(&mut grads, *p, gx)?;
                    }
                    if let Some(p) = pw {
                        accumulate(&mut grads, *p, cg.weight)?;
                    }
                    if let Some(p) = pb {
                        let bshape = rec.nodes[*p].shape;
                        accumulate(&mut grads, *p, cg.bias.reshape(bshape)?)?;
                    }
                }
                Op::Silu { x, p } => {
                    if let Some(p) = p {
                        let gx = g.zip_map(x, |gv, xv| gv * activation::silu_grad_scalar(xv))?;
                        accumulate(&mut grads, *p, gx)?;
                    }
                }
                Op::Sigmoid { y, p } => {
                    if let Some(p) = p {
                        let gx = g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))?;
                        accumulate(&mut grads, *p, gx)?;
                    }
                }
                Op::Add(a, b) => {
                    if let Some(p) = a {
                        accumulate(&mut grads, *p, g.clone())?;
                    }
                    if let Some(p) = b {
                        accumulate(&mut grads, *p, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(p) = a {
                        accumulate(&mut grads, *p, g.clone())?;
                    }
                    if let Some(p) = b {
                        accumulate(&mut grads, *p, g.scale(-1.0))?;
                    }
                }
                Op::Mul { a, b, pa, pb } => {
                    if let Some(p) = pa {
                        accumulate(&mut grads, *p, g.mul(b)?)?;
                    }
                    if let Some(p) = pb {
                        accumulate(&mut grads, *p, g.mul(a)?)?;
                    }
                }
                Op::Scale(s, p) => {
                    if let Some(p) = p {
                        accumulate(&mut grads, *p, g.scale(*s))?;
                    }
                }
                Op::Offset(p) => {
                    if let Some(p) = p {
                        accumulate(&mut grads, *p, g)?;
                    }
                }
                Op::MulChannel { x, g: gate, px, pg } => {
                    if let Some(p) = px {
                        accumulate(&mut grads, *p, spatial::mul_channel(&g, gate)?)?;
                    }
                    if let Some(p) = pg {
                        let s = x.shape();
                        let mut gg = Tensor::zeros(gate.shape());
                        for n in 0..s.n {
                            for c in 0..s.c {
                                let acc: f64 = g
                                    .plane(n, c)
                                    .iter()
                                    .zip(x.plane(n, c))
                                    .map(|(&a, &b)| a as f64 * b as f64)
                                    .sum();
                                gg.set(n, c, 0, 0, acc as f32);
                            }
                        }
                        accumulate(&mut grads, *p, gg)?;
                    }
                }
                Op::Concat { channels, parents } => {
                    let parts = spatial::split_channels(&g, channels)?;
                    for (p, part) in parents.iter().zip(parts) {
                        if let Some(p) = p {
                            accumulate(&mut grads, *p, part)?;
                        }
                    }
                }
                Op::Slice { start, in_shape, p } => {
                    if let Some(p) = p {
                        let mut full = Tensor::zeros(*in_shape);
                        let len = g.shape().c;
                        for n in 0..in_shape.n {
                            for c in 0..len {
                                full.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                            }
                        }
                        accumulate(&mut grads, *p, full)?;
                    }
                }
                Op::Gap { in_shape, p } => {
                    if let Some(p) = p {
                        accumulate(&mut grads, *p, spatial::global_avg_pool_backward(&g, *in_shape))?;
                    }
                }
                Op::Upsample(p) => {
                    if let Some(p) = p {
                        accumulate(&mut grads, *p, spatial::upsample_nearest2x_backward(&g))?;
                    }
                }
                Op::Resize { in_shape, p } => {
                    if let Some(p) = p {
                        accumulate(&mut grads, *p, spatial::resize_bilinear_backward(&g, *in_shape))?;
                    }
                }
                Op::Norm {
                    scale,
                    stats,
                    px,
                    pscale,
                    pshift,
                } => {
                    let ng = norm::channel_norm_backward(&g, scale, stats);
                    if let Some(p) = px {
                        accumulate(&mut grads, *p, ng.input)?;
                    }
                    if let Some(p) = pscale {
                        accumulate(&mut grads, *p, ng.scale)?;
                    }
                    if let Some(p) = pshift {
                        accumulate(&mut grads, *p, ng.shift)?;
                    }
                }
                Op::Dwt { basis, p } => {
                    if let Some(p) = p {
                        let gx = wavelet::dwt2_adjoint(&SubbandSet::unpack(&g)?, *basis)?;
                        accumulate(&mut grads, *p, gx)?;
                    }
                }
                Op::Idwt { basis, p } => {
                    if let Some(p) = p {
                        let gb = wavelet::idwt2_adjoint(&g, *basis)?.pack()?;
                        accumulate(&mut grads, *p, gb)?;
                    }
                }
                Op::Sum { in_shape, p } => {
                    if let Some(p) = p {
                        accumulate(&mut grads, *p, Tensor::full(*in_shape, g.data()[0]))?;
                    }
                }
                Op::L1 { pred, target, pp, pt } => {
                    let k = g.data()[0] / pred.numel().max(1) as f32;
                    let gp = pred.zip_map(target, |a, b| {
                        let d = a - b;
                        if d > 0.0 {
                            k
                        } else if d < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })?;
                    if let Some(p) = pt {
                        accumulate(&mut grads, *p, gp.scale(-1.0))?;
                    }
                    if let Some(p) = pp {
                        accumulate(&mut grads, *p, gp)?;
                    }
                }
                Op::Cosine { pred, target, pp, pt } => {
                    let nb = pred.shape().n;
                    let k = g.data()[0] as f64 / nb.max(1) as f64;
                    let mut gp = Tensor::zeros(pred.shape());
                    let mut gt = Tensor::zeros(pred.shape());
                    for n in 0..nb {
                        let (a, b) = (pred.sample(n), target.sample(n));
                        let parts = cosine_parts(a, b);
                        cosine_grad(a, b, &parts, k, gp.sample_mut(n));
                        cosine_grad(b, a, &parts.swapped(), k, gt.sample_mut(n));
                    }
                    if let Some(p) = pp {
                        accumulate(&mut grads, *p, gp)?;
                    }
                    if let Some(p) = pt {
                        accumulate(&mut grads, *p, gt)?;
                    }
                }
            }
        }

        let mut by_name = Vec::with_capacity(rec.param_order.len());
        for name in &rec.param_order {
            let var = &rec.params[name];
            let g = match var.node {
                Some(id) => grads[id].clone().unwrap_or_else(|| Tensor::zeros(var.shape())),
                None => Tensor::zeros(var.shape()),
            };
            by_name.push((name.clone(), g));
        }
        let mut by_node = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &rec.nodes[id].op) {
                by_node.insert(id, g);
            }
        }
        Ok(Gradients { by_name, by_node })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => existing.axpy(1.0, &g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

struct CosineParts {
    dot: f64,
    na: f64,
    nb: f64,
    cos: f64,
}

impl CosineParts {
    fn swapped(&self) -> Self {
        CosineParts {
            dot: self.dot,
            na: self.nb,
            nb: self.na,
            cos: self.cos,
        }
    }
}

fn cosine_parts(a: &[f32], b: &[f32]) -> CosineParts {
    let mut dot = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    CosineParts {
        dot,
        na,
        nb,
        cos: dot / (na * nb + COSINE_EPS),
    }
}

/// d cos / d a for cos = a.b / (|a||b| + eps), scaled by `k`.
fn cosine_grad(a: &[f32], b: &[f32], p: &CosineParts, k: f64, out: &mut [f32]) {
    let d = p.na * p.nb + COSINE_EPS;
    // d|a|/da = a/|a|, taken as 0 at a = 0
    let radial = if p.na > 0.0 { p.dot * p.nb / (p.na * d * d) } else { 0.0 };
    for ((o, &av), &bv) in out.iter_mut().zip(a).zip(b) {
        *o += (k * (bv as f64 / d - radial * av as f64)) as f32;
    }
}

/// Gradients of a scalar with respect to the tape's leaves.
pub struct Gradients {
    by_name: Vec<(String, Tensor)>,
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a named leaf (zeros if the loss does not depend on it).
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.by_name
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g)
            .ok_or_else(|| Error::Tape(format!("'{name}' was not recorded on the tape")))
    }

    /// Gradient with respect to a tracked leaf variable.
    pub fn wrt(&self, var: &Var) -> Result<Tensor> {
        let id = var
            .node
            .ok_or_else(|| Error::Tape("variable is not tracked by the tape".into()))?;
        Ok(self
            .by_node
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape())))
    }

    /// Named gradients in leaf registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn into_named(self) -> Vec<(String, Tensor)> {
        self.by_name
    }
}

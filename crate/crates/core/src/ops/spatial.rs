//! Channel concatenation, pooling and resampling kernels with their adjoints.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Concatenate along channels; part `k` occupies its own contiguous slice.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels: no parts"))?
        .shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape(format!(
                "concat_channels: part {s} does not match {first} in n/h/w"
            )));
        }
        c_total += s.c;
    }
    let out_shape = first.with_c(c_total);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Split an upstream gradient back into per-part channel slices.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let mut start = 0;
    let mut out = Vec::with_capacity(channels.len());
    for &c in channels {
        out.push(grad.slice_channels(start, c)?);
        start += c;
    }
    if start != grad.shape().c {
        return Err(Error::shape("split_channels: channel counts do not sum"));
    }
    Ok(out)
}

/// Mean over each `h*w` plane; output `(n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::shape(format!("global_avg_pool: empty spatial extent in {s}")));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let m: f64 = x.plane(n, c).iter().map(|&v| v as f64).sum::<f64>() / s.plane() as f64;
            out.set(n, c, 0, 0, m as f32);
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(grad: &Tensor, input_shape: Shape) -> Tensor {
    let inv = 1.0 / input_shape.plane() as f32;
    let mut out = Tensor::zeros(input_shape);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = grad.at(n, c, 0, 0) * inv;
            out.plane_mut(n, c).fill(g);
        }
    }
    out
}

/// `x * gate` where `gate` is `(n, c, 1, 1)` (per-sample, per-channel scale).
pub fn mul_channel(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if gate.shape() != Shape::new(s.n, s.c, 1, 1) {
        return Err(Error::shape(format!(
            "mul_channel: gate {} does not match {s}",
            gate.shape()
        )));
    }
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = gate.at(n, c, 0, 0);
            for v in out.plane_mut(n, c) {
                *v *= g;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h2, w2) = (s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(s.with_hw(h2, w2));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                for xx in 0..s.w {
                    let v = src[y * s.w + xx];
                    let o = 2 * y * w2 + 2 * xx;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + w2] = v;
                    dst[o + w2 + 1] = v;
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward(grad: &Tensor) -> Tensor {
    let s = grad.shape();
    let (h, w) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(s.with_hw(h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                for x in 0..w {
                    let o = 2 * y * s.w + 2 * x;
                    dst[y * w + x] = src[o] + src[o + 1] + src[o + s.w] + src[o + s.w + 1];
                }
            }
        }
    }
    out
}

/// Source taps of one output coordinate for align-corners-false bilinear sampling.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f32,
}

fn taps(out_len: usize, in_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 };
            Tap { i0, i1, frac }
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres (align_corners = false) and
/// edge clamping.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear: output size must be positive"));
    }
    if s.plane() == 0 {
        return Err(Error::shape(format!("resize_bilinear: empty input {s}")));
    }
    if out_h == s.h && out_w == s.w {
        return Ok(x.clone());
    }
    let ty = taps(out_h, s.h);
    let tx = taps(out_w, s.w);
    let mut out = Tensor::zeros(s.with_hw(out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, a) in ty.iter().enumerate() {
                let r0 = &src[a.i0 * s.w..(a.i0 + 1) * s.w];
                let r1 = &src[a.i1 * s.w..(a.i1 + 1) * s.w];
                for (ox, b) in tx.iter().enumerate() {
                    let top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.frac;
                    let bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.frac;
                    dst[oy * out_w + ox] = top + (bot - top) * a.frac;
                }
            }
        }
    }
    Ok(out)
}

pub fn resize_bilinear_backward(grad: &Tensor, input_shape: Shape) -> Tensor {
    let s = input_shape;
    let g = grad.shape();
    if g.h == s.h && g.w == s.w {
        return grad.clone();
    }
    let ty = taps(g.h, s.h);
    let tx = taps(g.w, s.w);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let v = src[oy * g.w + ox];
                    let top = v * (1.0 - a.frac);
                    let bot = v * a.frac;
                    dst[a.i0 * s.w + b.i0] += top * (1.0 - b.frac);
                    dst[a.i0 * s.w + b.i1] += top * b.frac;
                    dst[a.i1 * s.w + b.i0] += bot * (1.0 - b.frac);
                    dst[a.i1 * s.w + b.i1] += bot * b.frac;
                }
            }
        }
    }
    out
}

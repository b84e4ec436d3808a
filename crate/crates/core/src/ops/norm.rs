//! Per-channel standardisation over spatial positions with learned affine.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const NORM_EPS: f32 = 1e-5;

/// Saved statistics needed by the backward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    /// Standardised input, `(x - mean) * inv_std`.
    pub normalized: Tensor,
    /// `1 / sqrt(var + eps)` per `(n, c)`.
    pub inv_std: Vec<f32>,
}

fn check_affine(x: Shape, scale: &Tensor, shift: &Tensor) -> Result<()> {
    let want = Shape::new(1, x.c, 1, 1);
    if scale.shape() != want || shift.shape() != want {
        return Err(Error::shape(format!(
            "channel_norm: scale {} / shift {} must be {want}",
            scale.shape(),
            shift.shape()
        )));
    }
    Ok(())
}

pub fn channel_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<(Tensor, NormStats)> {
    let s = x.shape();
    check_affine(s, scale, shift)?;
    if s.plane() == 0 {
        return Err(Error::shape("channel_norm: empty spatial extent"));
    }
    let p = s.plane() as f64;
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / p;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / p;
            let is = (1.0 / (var + NORM_EPS as f64).sqrt()) as f32;
            inv_std.push(is);
            let (g, b) = (scale.data()[c], shift.data()[c]);
            let mean = mean as f32;
            let xn = normalized.plane_mut(n, c);
            for (d, &v) in xn.iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
            let xn = normalized.plane(n, c).to_vec();
            for (o, v) in out.plane_mut(n, c).iter_mut().zip(xn) {
                *o = g * v + b;
            }
        }
    }
    Ok((out, NormStats { normalized, inv_std }))
}

pub struct NormGrads {
    pub input: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

pub fn channel_norm_backward(grad: &Tensor, scale: &Tensor, stats: &NormStats) -> NormGrads {
    let s = grad.shape();
    let p = s.plane() as f64;
    let mut gin = Tensor::zeros(s);
    let mut gscale = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let mut gshift = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad.plane(n, c);
            let xn = stats.normalized.plane(n, c);
            let gamma = scale.data()[c] as f64;
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for (&gv, &xv) in g.iter().zip(xn) {
                sum_g += gv as f64;
                sum_gx += gv as f64 * xv as f64;
            }
            gshift.data_mut()[c] += sum_g as f32;
            gscale.data_mut()[c] += sum_gx as f32;
            // dx = gamma * inv_std * (g - mean(g) - xn * mean(g * xn))
            let is = stats.inv_std[n * s.c + c] as f64;
            let (mg, mgx) = (sum_g / p, sum_gx / p);
            for ((d, &gv), &xv) in gin.plane_mut(n, c).iter_mut().zip(g).zip(xn) {
                *d = (gamma * is * (gv as f64 - mg - xv as f64 * mgx)) as f32;
            }
        }
    }
    NormGrads {
        input: gin,
        scale: gscale,
        shift: gshift,
    }
}

//! 2D cross-correlation with zero padding, lowered to im2col + sgemm.
//!
//! Columns are processed in fixed-size chunks of whole output rows so that the
//! scratch buffer stays bounded at large resolutions. The chunking depends only
//! on the layer geometry, so every output element is always produced by the
//! same sequence of floating-point operations.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Upper bound on the im2col scratch buffer, in elements.
const SCRATCH_ELEMS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be positive"));
        }
        if input.c != weight.c {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels but weight {} expects {}",
                input.c, weight, weight.c
            )));
        }
        let (hp, wp) = (input.h + 2 * padding, input.w + 2 * padding);
        if hp < weight.h || wp < weight.w {
            return Err(Error::shape(format!(
                "conv2d: padded input {hp}x{wp} smaller than kernel {}x{}",
                weight.h, weight.w
            )));
        }
        Ok(ConvGeometry {
            c_in: input.c,
            c_out: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            padding,
            h_in: input.h,
            w_in: input.w,
            h_out: (hp - weight.h) / stride + 1,
            w_out: (wp - weight.w) / stride + 1,
        })
    }

    /// Reduction length of one output element.
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output rows handled per chunk.
    fn rows_per_chunk(&self) -> usize {
        let per_row = self.k() * self.w_out;
        (SCRATCH_ELEMS / per_row.max(1)).clamp(1, self.h_out)
    }

    /// Scatter the receptive fields of output rows `[r0, r1)` into `cols`
    /// (row-major `[k, (r1-r0)*w_out]`).
    fn im2col(&self, src: &[f32], r0: usize, r1: usize, cols: &mut [f32]) {
        let tile = (r1 - r0) * self.w_out;
        let plane = self.h_in * self.w_in;
        let pad = self.padding as isize;
        for ci in 0..self.c_in {
            let chan = &src[ci * plane..(ci + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let k = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[k * tile..(k + 1) * tile];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * self.stride) as isize - pad + ky as isize;
                        let row = &mut dst[ri * self.w_out..(ri + 1) * self.w_out];
                        if iy < 0 || iy >= self.h_in as isize {
                            row.fill(0.0);
                            continue;
                        }
                        let srow = &chan[iy as usize * self.w_in..(iy as usize + 1) * self.w_in];
                        for (ox, d) in row.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize - pad + kx as isize;
                            *d = if ix < 0 || ix >= self.w_in as isize {
                                0.0
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulate `cols` back into `dst`.
    fn col2im(&self, cols: &[f32], r0: usize, r1: usize, dst: &mut [f32]) {
        let tile = (r1 - r0) * self.w_out;
        let plane = self.h_in * self.w_in;
        let pad = self.padding as isize;
        for ci in 0..self.c_in {
            let chan = &mut dst[ci * plane..(ci + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let k = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[k * tile..(k + 1) * tile];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * self.stride) as isize - pad + ky as isize;
                        if iy < 0 || iy >= self.h_in as isize {
                            continue;
                        }
                        let drow = &mut chan[iy as usize * self.w_in..(iy as usize + 1) * self.w_in];
                        let row = &src[ri * self.w_out..(ri + 1) * self.w_out];
                        for (ox, &g) in row.iter().enumerate() {
                            let ix = (ox * self.stride) as isize - pad + kx as isize;
                            if ix >= 0 && ix < self.w_in as isize {
                                drow[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = alpha * a[m,k] b[k,n] + beta * c[m,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the slices cover every index touched for the given dims and strides
    // (checked by the callers' construction and the debug assertions above).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::shape(format!(
                "conv2d: bias {} does not have {c_out} elements",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Zero-padded cross-correlation. `weight` is `(c_out, c_in, kh, kw)`, `bias`
/// holds `c_out` values.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    check_bias(bias, g.c_out)?;
    let s = input.shape();
    let n_cols = g.cols();
    let kk = g.k();
    let mut out = Tensor::zeros(Shape::new(s.n, g.c_out, g.h_out, g.w_out));
    let rows = g.rows_per_chunk();
    let mut scratch = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; kk * rows * g.w_out]
    };

    for n in 0..s.n {
        let src = input.sample(n);
        let dst = out.sample_mut(n);
        if g.is_pointwise() {
            gemm(g.c_out, kk, n_cols, weight.data(), kk, 1, src, n_cols, 1, 0.0, dst, n_cols);
        } else {
            let mut r0 = 0;
            while r0 < g.h_out {
                let r1 = (r0 + rows).min(g.h_out);
                let tile = (r1 - r0) * g.w_out;
                let cols = &mut scratch[..kk * tile];
                g.im2col(src, r0, r1, cols);
                gemm(
                    g.c_out,
                    kk,
                    tile,
                    weight.data(),
                    kk,
                    1,
                    cols,
                    tile,
                    1,
                    0.0,
                    &mut dst[r0 * g.w_out..],
                    n_cols,
                );
                r0 = r1;
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut dst[co * n_cols..(co + 1) * n_cols] {
                    *v += bv;
                }
            }
        }
    }
    out.ensure_finite("conv2d output")?;
    Ok(out)
}

/// Gradients of [`conv2d`] given the upstream gradient.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let s = input.shape();
    let expect = Shape::new(s.n, g.c_out, g.h_out, g.w_out);
    if grad_out.shape() != expect {
        return Err(Error::shape(format!(
            "conv2d backward: grad {} but output is {expect}",
            grad_out.shape()
        )));
    }
    let n_cols = g.cols();
    let kk = g.k();
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(Shape::new(1, g.c_out, 1, 1));
    let mut gin = want_input.then(|| Tensor::zeros(s));
    let rows = g.rows_per_chunk();
    let pointwise = g.is_pointwise();
    let mut cols_buf = if pointwise {
        Vec::new()
    } else {
        vec![0.0f32; kk * rows * g.w_out]
    };
    let mut gcols_buf = if want_input && !pointwise {
        vec![0.0f32; kk * rows * g.w_out]
    } else {
        Vec::new()
    };

    for n in 0..s.n {
        let src = input.sample(n);
        let gout = grad_out.sample(n);
        for co in 0..g.c_out {
            let acc: f64 = gout[co * n_cols..(co + 1) * n_cols]
                .iter()
                .map(|&v| v as f64)
                .sum();
            gb.data_mut()[co] += acc as f32;
        }
        if pointwise {
            // gw[co, ci] += gout[co, :] . src[ci, :]
            gemm(g.c_out, n_cols, kk, gout, n_cols, 1, src, 1, n_cols, 1.0, gw.data_mut(), kk);
            if let Some(gin) = gin.as_mut() {
                let dst = gin.sample_mut(n);
                gemm(kk, g.c_out, n_cols, weight.data(), 1, kk, gout, n_cols, 1, 0.0, dst, n_cols);
            }
            continue;
        }
        let mut r0 = 0;
        while r0 < g.h_out {
            let r1 = (r0 + rows).min(g.h_out);
            let tile = (r1 - r0) * g.w_out;
            let cols = &mut cols_buf[..kk * tile];
            g.im2col(src, r0, r1, cols);
            let gtile = &gout[r0 * g.w_out..];
            gemm(g.c_out, tile, kk, gtile, n_cols, 1, cols, 1, tile, 1.0, gw.data_mut(), kk);
            if let Some(gin) = gin.as_mut() {
                let gcols = &mut gcols_buf[..kk * tile];
                gemm(kk, g.c_out, tile, weight.data(), 1, kk, gtile, n_cols, 1, 0.0, gcols, tile);
                g.col2im(gcols, r0, r1, gin.sample_mut(n));
            }
            r0 = r1;
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

//! Separable 2D discrete wavelet transform over NCHW tensors.
//!
//! Sub-band naming: the first letter is the vertical (along-height) filter,
//! the second the horizontal (along-width) filter. `LH` is therefore low-pass
//! vertically and high-pass horizontally, i.e. it responds to vertical edges.
//! Decimation keeps phase 0: output `i` is built from inputs `2i` and `2i+1`.
//! Odd spatial sizes are rejected; callers pad beforehand.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const S: f32 = std::f32::consts::FRAC_1_SQRT_2;

/// The supported two-tap filter banks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum WaveletBasis {
    #[default]
    Haar,
    Bior11,
    Rbio11,
}

/// Analysis and synthesis taps in correlation form: the analysis output for
/// the pair `(x0, x1)` is `t[0]*x0 + t[1]*x1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterBank {
    pub analysis_lo: [f32; 2],
    pub analysis_hi: [f32; 2],
    pub synthesis_lo: [f32; 2],
    pub synthesis_hi: [f32; 2],
}

impl WaveletBasis {
    pub const ALL: [WaveletBasis; 3] = [WaveletBasis::Haar, WaveletBasis::Bior11, WaveletBasis::Rbio11];

    pub fn name(&self) -> &'static str {
        match self {
            WaveletBasis::Haar => "haar",
            WaveletBasis::Bior11 => "bior1.1",
            WaveletBasis::Rbio11 => "rbio1.1",
        }
    }

    pub fn filters(&self) -> FilterBank {
        match self {
            WaveletBasis::Haar => FilterBank {
                analysis_lo: [S, S],
                analysis_hi: [S, -S],
                synthesis_lo: [S, S],
                synthesis_hi: [S, -S],
            },
            // Published bior1.1 decomposition/reconstruction pairs. The
            // high-pass taps are the reversed Haar taps; the spline order 1/1
            // pair is orthogonal, so analysis and synthesis coincide.
            WaveletBasis::Bior11 => FilterBank {
                analysis_lo: [S, S],
                analysis_hi: [-S, S],
                synthesis_lo: [S, S],
                synthesis_hi: [-S, S],
            },
            // Reverse biorthogonal: analysis and synthesis roles of bior1.1
            // swapped, which for order 1/1 yields the same numbers.
            WaveletBasis::Rbio11 => FilterBank {
                analysis_lo: [S, S],
                analysis_hi: [-S, S],
                synthesis_lo: [S, S],
                synthesis_hi: [-S, S],
            },
        }
    }
}

impl fmt::Display for WaveletBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaveletBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(WaveletBasis::Haar),
            "bior1.1" => Ok(WaveletBasis::Bior11),
            "rbio1.1" => Ok(WaveletBasis::Rbio11),
            other => Err(Error::Config(format!(
                "unknown wavelet '{other}' (expected haar, bior1.1 or rbio1.1)"
            ))),
        }
    }
}

/// One decomposition level.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl SubbandSet {
    fn check(&self) -> Result<Shape> {
        let s = self.ll.shape();
        for (name, t) in [("lh", &self.lh), ("hl", &self.hl), ("hh", &self.hh)] {
            if t.shape() != s {
                return Err(Error::shape(format!(
                    "sub-band {name} is {} but ll is {s}",
                    t.shape()
                )));
            }
        }
        Ok(s)
    }

    /// Channel concatenation in the order LL, LH, HL, HH.
    pub fn pack(&self) -> Result<Tensor> {
        self.check()?;
        crate::ops::concat_channels(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }

    /// Inverse of [`SubbandSet::pack`]; the channel count must be a multiple of 4.
    pub fn unpack(packed: &Tensor) -> Result<Self> {
        let c = packed.shape().c;
        if c % 4 != 0 {
            return Err(Error::shape(format!(
                "packed sub-bands need a multiple of 4 channels, got {c}"
            )));
        }
        let q = c / 4;
        Ok(SubbandSet {
            ll: packed.slice_channels(0, q)?,
            lh: packed.slice_channels(q, q)?,
            hl: packed.slice_channels(2 * q, q)?,
            hh: packed.slice_channels(3 * q, q)?,
        })
    }

    pub fn energy(&self) -> f64 {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }
}

/// Detail bands of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct Details {
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl Details {
    pub fn zeros_like(&self) -> Self {
        let s = self.lh.shape();
        Details {
            lh: Tensor::zeros(s),
            hl: Tensor::zeros(s),
            hh: Tensor::zeros(s),
        }
    }

    pub fn with_ll(&self, ll: Tensor) -> SubbandSet {
        SubbandSet {
            ll,
            lh: self.lh.clone(),
            hl: self.hl.clone(),
            hh: self.hh.clone(),
        }
    }
}

/// Multi-level decomposition: `details[0]` is the finest level.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub top_ll: Tensor,
    pub details: Vec<Details>,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// The four sub-bands of the coarsest level.
    pub fn top(&self) -> Option<SubbandSet> {
        self.details.last().map(|d| d.with_ll(self.top_ll.clone()))
    }
}

fn check_even(s: Shape) -> Result<()> {
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(format!(
            "wavelet transform needs even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Two-tap separable analysis with explicit taps.
fn analyze(x: &Tensor, lo: [f32; 2], hi: [f32; 2]) -> Result<SubbandSet> {
    let s = x.shape();
    check_even(s)?;
    let (h2, w2) = (s.h / 2, s.w / 2);
    let half = s.with_hw(h2, w2);
    let mut out = SubbandSet {
        ll: Tensor::zeros(half),
        lh: Tensor::zeros(half),
        hl: Tensor::zeros(half),
        hh: Tensor::zeros(half),
    };
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let base = (n * s.c + c) * h2 * w2;
            for i in 0..h2 {
                let r0 = &src[2 * i * s.w..(2 * i + 1) * s.w];
                let r1 = &src[(2 * i + 1) * s.w..(2 * i + 2) * s.w];
                for j in 0..w2 {
                    // vertical pass on both columns of the 2x2 block
                    let vl0 = lo[0] * r0[2 * j] + lo[1] * r1[2 * j];
                    let vl1 = lo[0] * r0[2 * j + 1] + lo[1] * r1[2 * j + 1];
                    let vh0 = hi[0] * r0[2 * j] + hi[1] * r1[2 * j];
                    let vh1 = hi[0] * r0[2 * j + 1] + hi[1] * r1[2 * j + 1];
                    let o = base + i * w2 + j;
                    out.ll.data_mut()[o] = lo[0] * vl0 + lo[1] * vl1;
                    out.lh.data_mut()[o] = hi[0] * vl0 + hi[1] * vl1;
                    out.hl.data_mut()[o] = lo[0] * vh0 + lo[1] * vh1;
                    out.hh.data_mut()[o] = hi[0] * vh0 + hi[1] * vh1;
                }
            }
        }
    }
    Ok(out)
}

/// Two-tap separable synthesis: `x = lo^T a + hi^T d` along each axis.
fn synthesize(b: &SubbandSet, lo: [f32; 2], hi: [f32; 2]) -> Result<Tensor> {
    let s = b.check()?;
    let (h, w) = (s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(s.with_hw(h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let (ll, lh, hl, hh) = (
                b.ll.plane(n, c),
                b.lh.plane(n, c),
                b.hl.plane(n, c),
                b.hh.plane(n, c),
            );
            let dst = out.plane_mut(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    let k = i * s.w + j;
                    // undo the horizontal pass
                    let vl0 = lo[0] * ll[k] + hi[0] * lh[k];
                    let vl1 = lo[1] * ll[k] + hi[1] * lh[k];
                    let vh0 = lo[0] * hl[k] + hi[0] * hh[k];
                    let vh1 = lo[1] * hl[k] + hi[1] * hh[k];
                    // undo the vertical pass
                    let t = 2 * i * w + 2 * j;
                    dst[t] = lo[0] * vl0 + hi[0] * vh0;
                    dst[t + 1] = lo[0] * vl1 + hi[0] * vh1;
                    dst[t + w] = lo[1] * vl0 + hi[1] * vh0;
                    dst[t + w + 1] = lo[1] * vl1 + hi[1] * vh1;
                }
            }
        }
    }
    Ok(out)
}

/// Single-level forward transform.
pub fn dwt2(x: &Tensor, basis: WaveletBasis) -> Result<SubbandSet> {
    let f = basis.filters();
    analyze(x, f.analysis_lo, f.analysis_hi)
}

/// Single-level inverse transform.
pub fn idwt2(bands: &SubbandSet, basis: WaveletBasis) -> Result<Tensor> {
    let f = basis.filters();
    synthesize(bands, f.synthesis_lo, f.synthesis_hi)
}

/// Adjoint of [`dwt2`] (used for back-propagation).
pub fn dwt2_adjoint(grad: &SubbandSet, basis: WaveletBasis) -> Result<Tensor> {
    let f = basis.filters();
    synthesize(grad, f.analysis_lo, f.analysis_hi)
}

/// Adjoint of [`idwt2`].
pub fn idwt2_adjoint(grad: &Tensor, basis: WaveletBasis) -> Result<SubbandSet> {
    let f = basis.filters();
    analyze(grad, f.synthesis_lo, f.synthesis_hi)
}

pub const MAX_LEVELS: usize = 3;

/// Recursive decomposition of the LL band, `levels` in `1..=3`.
pub fn decompose(x: &Tensor, levels: usize, basis: WaveletBasis) -> Result<WaveletPyramid> {
    if !(1..=MAX_LEVELS).contains(&levels) {
        return Err(Error::Config(format!(
            "unsupported decomposition level {levels} (expected 1..={MAX_LEVELS})"
        )));
    }
    let s = x.shape();
    let m = 1 << levels;
    if s.h % m != 0 || s.w % m != 0 {
        return Err(Error::shape(format!(
            "{}x{} is not divisible by {m} for a {levels}-level decomposition",
            s.h, s.w
        )));
    }
    let mut ll = x.clone();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let b = dwt2(&ll, basis)?;
        details.push(Details {
            lh: b.lh,
            hl: b.hl,
            hh: b.hh,
        });
        ll = b.ll;
    }
    Ok(WaveletPyramid { top_ll: ll, details })
}

/// Inverse of [`decompose`].
pub fn reconstruct(p: &WaveletPyramid, basis: WaveletBasis) -> Result<Tensor> {
    if p.details.is_empty() {
        return Err(Error::shape("pyramid has no levels"));
    }
    let mut ll = p.top_ll.clone();
    for d in p.details.iter().rev() {
        if d.lh.shape() != ll.shape() {
            return Err(Error::shape(format!(
                "pyramid level has details {} but LL {}",
                d.lh.shape(),
                ll.shape()
            )));
        }
        ll = idwt2(&d.with_ll(ll), basis)?;
    }
    Ok(ll)
}

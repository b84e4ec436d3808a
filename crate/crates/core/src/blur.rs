//! Blur synthesis: `y = k * x` with replicate boundaries.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_KERNEL_SIDE: usize = 41;

/// Non-negative point-spread function normalised to unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    pub name: String,
    pub h: usize,
    pub w: usize,
    pub taps: Vec<f32>,
}

impl BlurKernel {
    pub fn new(name: impl Into<String>, h: usize, w: usize, taps: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let bad = |msg: String| Error::Config(format!("kernel '{name}': {msg}"));
        if h % 2 == 0 || w % 2 == 0 || h > MAX_KERNEL_SIDE || w > MAX_KERNEL_SIDE {
            return Err(bad(format!("sides must be odd and at most {MAX_KERNEL_SIDE}, got {h}x{w}")));
        }
        if taps.len() != h * w {
            return Err(bad(format!("expected {} taps, got {}", h * w, taps.len())));
        }
        if let Some(i) = taps.iter().position(|&t| !(t >= 0.0) || !t.is_finite()) {
            return Err(bad(format!("tap {i} is negative or not finite ({})", taps[i])));
        }
        let sum: f64 = taps.iter().map(|&t| t as f64).sum();
        if sum == 0.0 {
            return Err(bad("all taps are zero".into()));
        }
        let taps = taps.iter().map(|&t| (t as f64 / sum) as f32).collect();
        Ok(BlurKernel { name, h, w, taps })
    }

    /// Identity kernel of the given odd side.
    pub fn delta(side: usize) -> Self {
        let mut taps = vec![0.0; side * side];
        taps[side * side / 2] = 1.0;
        BlurKernel::new("delta", side, side, taps).expect("valid delta kernel")
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.taps[y * self.w + x]
    }

    /// Parse the text format: a header line `h w`, then `h` rows of `w` values.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Config(format!("kernel '{name}': empty file")))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().ok())
            .collect::<Option<_>>()
            .filter(|d: &Vec<usize>| d.len() == 2)
            .ok_or_else(|| Error::Config(format!("kernel '{name}': header must be 'h w', got '{header}'")))?;
        let (h, w) = (dims[0], dims[1]);
        let mut taps = Vec::with_capacity(h * w);
        for (r, line) in lines.enumerate() {
            let row: Vec<f32> = line
                .split_whitespace()
                .map(|t| t.parse().ok())
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Config(format!("kernel '{name}': row {r} has a non-numeric value")))?;
            if row.len() != w {
                return Err(Error::Config(format!(
                    "kernel '{name}': row {r} has {} values, expected {w}",
                    row.len()
                )));
            }
            taps.extend(row);
        }
        if taps.len() != h * w {
            return Err(Error::Config(format!(
                "kernel '{name}': found {} rows, expected {h}",
                taps.len() / w.max(1)
            )));
        }
        BlurKernel::new(name, h, w, taps)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.h, self.w);
        for row in self.taps.chunks(self.w) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn load_kernel(path: &Path) -> Result<BlurKernel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("kernel");
    BlurKernel::parse(name, &text).map_err(|e| match e {
        Error::Config(msg) => Error::format(path, msg),
        other => other,
    })
}

/// Ordered, non-empty collection of kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    kernels: Vec<BlurKernel>,
}

impl KernelBank {
    pub fn new(kernels: Vec<BlurKernel>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::Config("kernel bank is empty".into()));
        }
        Ok(KernelBank { kernels })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn get(&self, i: usize) -> &BlurKernel {
        &self.kernels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BlurKernel> {
        self.kernels.iter()
    }
}

/// Every `*.txt` file in `dir`, in filename order.
pub fn load_kernel_bank(dir: &Path) -> Result<KernelBank> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "txt") {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        return Err(Error::format(dir, "no kernel files (*.txt) found"));
    }
    paths.sort();
    KernelBank::new(paths.iter().map(|p| load_kernel(p)).collect::<Result<_>>()?)
}

/// Convolve every channel with `k` (kernel flipped), clamping coordinates at
/// the border.
pub fn apply_blur(x: &Tensor, k: &BlurKernel) -> Result<Tensor> {
    let s = x.shape();
    if k.h > s.h || k.w > s.w {
        return Err(Error::shape(format!(
            "kernel '{}' ({}x{}) is larger than the image ({}x{})",
            k.name, k.h, k.w, s.h, s.w
        )));
    }
    let (ry, rx) = ((k.h / 2) as isize, (k.w / 2) as isize);
    let (h, w) = (s.h as isize, s.w as isize);
    // padded plane so the inner loop has no bounds logic
    let (ph, pw) = (s.h + k.h - 1, s.w + k.w - 1);
    let mut padded = vec![0.0f32; ph * pw];
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for py in 0..ph {
                let sy = (py as isize - ry).clamp(0, h - 1) as usize;
                for px in 0..pw {
                    let sx = (px as isize - rx).clamp(0, w - 1) as usize;
                    padded[py * pw + px] = src[sy * s.w + sx];
                }
            }
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let row = &mut dst[y * s.w..(y + 1) * s.w];
                for ky in 0..k.h {
                    // y[i] = sum_j k[j] x[i - j + r]: flipped kernel row
                    let krow = &k.taps[(k.h - 1 - ky) * k.w..(k.h - ky) * k.w];
                    let prow = &padded[(y + ky) * pw..];
                    for kx in 0..k.w {
                        let kv = krow[k.w - 1 - kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for (o, &p) in row.iter_mut().zip(&prow[kx..kx + s.w]) {
                            *o += kv * p;
                        }
                    }
                }
            }
        }
    }
    out.ensure_finite("apply_blur")?;
    Ok(out)
}

/// Uniform kernel index drawn from a generator seeded with `seed`.
pub fn choose_kernel(bank: &KernelBank, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).gen_range(0..bank.len())
}

#[derive(Clone, Debug)]
pub struct BlurPair {
    pub blurred: Tensor,
    pub sharp: Tensor,
    pub kernel_id: usize,
    pub kernel_name: String,
}

pub fn make_pair(x: &Tensor, bank: &KernelBank, seed: u64) -> Result<BlurPair> {
    let kernel_id = choose_kernel(bank, seed);
    let k = bank.get(kernel_id);
    Ok(BlurPair {
        blurred: apply_blur(x, k)?,
        sharp: x.clone(),
        kernel_id,
        kernel_name: k.name.clone(),
    })
}

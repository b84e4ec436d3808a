// Slow, direct reference implementations.
#![allow(dead_code)]

use edibnet::Tensor;

// Direct nested-loop cross-correlation in f64.
pub fn conv_reference(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let ho = (xs.h + 2 * pad - ws.h) / stride + 1;
    let wo = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Vec::with_capacity(xs.n * ws.n * ho * wo);
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co] as f64);
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.at(n, ci, iy as usize, ix as usize) as f64 * w.at(co, ci, ky, kx) as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

// Straightforward SSIM: for every window position, build the normalised
// Gaussian weights and compute the local statistics directly.
pub fn ssim_reference(a: &Tensor, b: &Tensor, peak: f64) -> f64 {
    let s = a.shape();
    let (win, sigma) = (11usize, 1.5f64);
    let half = (win / 2) as f64;
    let mut g = vec![0.0f64; win * win];
    for y in 0..win {
        for x in 0..win {
            let (dy, dx) = (y as f64 - half, x as f64 - half);
            g[y * win + x] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= norm);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);

    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = 0.0;
            let mut count = 0usize;
            for y0 in 0..=s.h - win {
                for x0 in 0..=s.w - win {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for y in 0..win {
                        for x in 0..win {
                            let wt = g[y * win + x];
                            ma += wt * a.at(n, c, y0 + y, x0 + x) as f64;
                            mb += wt * b.at(n, c, y0 + y, x0 + x) as f64;
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for y in 0..win {
                        for x in 0..win {
                            let wt = g[y * win + x];
                            let da = a.at(n, c, y0 + y, x0 + x) as f64 - ma;
                            let db = b.at(n, c, y0 + y, x0 + x) as f64 - mb;
                            va += wt * da * da;
                            vb += wt * db * db;
                            cov += wt * da * db;
                        }
                    }
                    acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
    }
    total / (s.n * s.c) as f64
}

//! Procedural test scenes: soft-edged flat and striped shapes over a gradient, with a
//! matching layered depth map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};

/// Width in pixels of the anti-aliased shape boundaries.
const EDGE_WIDTH: f32 = 2.0;

#[derive(Clone, Copy)]
enum Kind {
    Rect,
    Disc,
    Stripes,
}

/// An RGB image `(1, 3, h, w)` and a depth map `(1, 1, h/depth_div, w/depth_div)`
/// in `[0, 1]` (larger is farther).
pub fn scene(seed: u64, h: usize, w: usize, depth_div: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0: [f32; 3] = rng.gen();
    let c1: [f32; 3] = rng.gen();
    let mut img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let t = (x + y) as f32 / (h + w) as f32;
        0.15 + 0.7 * (c0[c] * (1.0 - t) + c1[c] * t)
    });
    let mut depth = vec![0.0f32; h * w];
    for (y, row) in depth.chunks_mut(w).enumerate() {
        row.fill(1.0 - 0.2 * y as f32 / h as f32);
    }
    let count = rng.gen_range(6..11);
    let mut shapes: Vec<(f32, Kind, [f32; 3], [f32; 4], f32)> = (0..count)
        .map(|_| {
            let kind = match rng.gen_range(0..3) {
                0 => Kind::Rect,
                1 => Kind::Disc,
                _ => Kind::Stripes,
            };
            let color: [f32; 3] = rng.gen();
            let cy = rng.gen_range(0.0..h as f32);
            let cx = rng.gen_range(0.0..w as f32);
            let ry = rng.gen_range(0.06..0.25) * h as f32;
            let rx = rng.gen_range(0.06..0.25) * w as f32;
            let d = rng.gen_range(0.1..0.75);
            let period = rng.gen_range(10.0..24.0);
            (d, kind, color, [cy, cx, ry, rx], period)
        })
        .collect();
    // paint far to near
    shapes.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (d, kind, color, [cy, cx, ry, rx], period) in shapes {
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f32 - cy, x as f32 - cx);
                // signed distance to the boundary in pixels (negative inside)
                let dist = match kind {
                    Kind::Rect | Kind::Stripes => (py.abs() - ry).max(px.abs() - rx),
                    Kind::Disc => ((py / ry).powi(2) + (px / rx).powi(2)).sqrt().mul_add(ry.min(rx), -ry.min(rx)),
                };
                let alpha = (0.5 - dist / EDGE_WIDTH).clamp(0.0, 1.0);
                if alpha == 0.0 {
                    continue;
                }
                let wave = if matches!(kind, Kind::Stripes) {
                    0.5 + 0.5 * ((x as f32 + y as f32) * std::f32::consts::PI / period).sin()
                } else {
                    1.0
                };
                for (c, &col) in color.iter().enumerate() {
                    let v = 0.05 + 0.9 * (col * wave + (1.0 - col) * (1.0 - wave));
                    let old = img.at(0, c, y, x);
                    img.set(0, c, y, x, old + (v - old) * alpha);
                }
                if alpha >= 0.5 {
                    depth[y * w + x] = d;
                }
            }
        }
    }
    let (dh, dw) = (h / depth_div, w / depth_div);
    let depth = Tensor::from_fn(Shape::new(1, 1, dh, dw), |_, _, y, x| {
        // box average over each depth cell
        let mut s = 0.0;
        for yy in 0..depth_div {
            for xx in 0..depth_div {
                s += depth[(y * depth_div + yy) * w + x * depth_div + xx];
            }
        }
        s / (depth_div * depth_div) as f32
    });
    (img, depth)
}

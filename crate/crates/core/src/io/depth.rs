use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image::ImageBuffer;

/// How raw depth in metres is mapped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthNorm {
    /// Divide by the largest value in the image.
    PerImageMax,
    /// Divide by a fixed range in metres, clamping above it.
    FixedRange(f32),
}

impl Default for DepthNorm {
    fn default() -> Self {
        DepthNorm::PerImageMax
    }
}

pub const DEFAULT_FIXED_RANGE_M: f32 = 10.0;
/// Raw integer units per metre (millimetres).
pub const DEFAULT_UNITS_PER_METRE: f32 = 1000.0;

/// Normalise raw integer depth samples to a `(1, 1, h, w)` map in `[0, 1]`.
pub fn normalize_depth(img: &ImageBuffer, norm: DepthNorm, units_per_metre: f32) -> Result<Tensor> {
    let metres: Vec<f32> = img.samples.iter().map(|&v| v as f32 / units_per_metre).collect();
    let scale = match norm {
        DepthNorm::PerImageMax => metres.iter().copied().fold(0.0f32, f32::max),
        DepthNorm::FixedRange(r) => r,
    };
    if !(scale > 0.0) {
        // an all-zero map stays zero
        return Tensor::from_vec(crate::tensor::Shape::new(1, 1, img.height, img.width), vec![0.0; metres.len()]);
    }
    let data = metres.iter().map(|&m| (m / scale).clamp(0.0, 1.0)).collect();
    Tensor::from_vec(crate::tensor::Shape::new(1, 1, img.height, img.width), data)
}

/// Load a single-channel depth raster whose integers are `1/units_per_metre`
/// metres (millimetres by default).
pub fn load_depth(path: &Path, norm: DepthNorm, units_per_metre: f32) -> Result<Tensor> {
    let img = ImageBuffer::read(path)?;
    if img.channels != 1 {
        return Err(Error::format(
            path,
            format!("depth map must be single-channel, found {} channels", img.channels),
        ));
    }
    normalize_depth(&img, norm, units_per_metre)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(samples: Vec<u16>) -> ImageBuffer {
        ImageBuffer {
            width: samples.len(),
            height: 1,
            channels: 1,
            maxval: 65535,
            samples,
        }
    }

    #[test]
    fn per_image_max() {
        let t = normalize_depth(&buf(vec![1000, 1000]), DepthNorm::PerImageMax, 1000.0).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0]);
        let t = normalize_depth(&buf(vec![1000, 2000]), DepthNorm::PerImageMax, 1000.0).unwrap();
        assert_eq!(t.data(), &[0.5, 1.0]);
    }

    #[test]
    fn fixed_range() {
        let t = normalize_depth(&buf(vec![5000, 20000]), DepthNorm::FixedRange(10.0), 1000.0).unwrap();
        assert_eq!(t.data(), &[0.5, 1.0]);
    }

    #[test]
    fn zero_map_stays_zero() {
        let t = normalize_depth(&buf(vec![0, 0]), DepthNorm::PerImageMax, 1000.0).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0]);
    }
}

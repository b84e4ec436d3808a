use crate::error::Result;
use crate::tensor::{Shape, Tensor};

/// Region of a padded tensor holding the original content.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Replicate the last row and column until both sides are multiples of
/// `multiple`.
pub fn pad_reflectless(image: &Tensor, multiple: usize) -> (Tensor, CropBox) {
    let s = image.shape();
    let m = multiple.max(1);
    let (h, w) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
    let crop = CropBox { y: 0, x: 0, h: s.h, w: s.w };
    if (h, w) == (s.h, s.w) {
        return (image.clone(), crop);
    }
    let padded = Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        image.at(n, c, y.min(s.h - 1), x.min(s.w - 1))
    });
    (padded, crop)
}

pub fn crop(t: &Tensor, b: CropBox) -> Result<Tensor> {
    t.crop(b.y, b.x, b.h, b.w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_to_multiple_and_crops_back() {
        let x = Tensor::from_fn(Shape::new(1, 3, 255, 255), |_, c, y, x| (c + y + x) as f32);
        let (p, b) = pad_reflectless(&x, 16);
        assert_eq!((p.shape().h, p.shape().w), (256, 256));
        assert_eq!(b, CropBox { y: 0, x: 0, h: 255, w: 255 });
        assert_eq!(p.at(0, 1, 255, 255), x.at(0, 1, 254, 254));
        assert_eq!(crop(&p, b).unwrap(), x);
    }

    #[test]
    fn aligned_is_identity() {
        let x = Tensor::full(Shape::new(1, 1, 32, 16), 0.25);
        let (p, b) = pad_reflectless(&x, 16);
        assert_eq!(p, x);
        assert_eq!((b.h, b.w), (32, 16));
    }
}

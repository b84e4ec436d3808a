//! Images, depth maps, weight files and padding.

pub mod depth;
pub mod image;
pub mod pad;
pub mod weights;

pub use depth::{load_depth, DepthNorm};
pub use image::{load_image, load_rgb, save_image, save_image16, ImageBuffer};
pub use pad::{crop, pad_reflectless, CropBox};
pub use weights::{load_model_weights, load_weights, save_weights};

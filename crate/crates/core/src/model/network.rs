//! The forward pass: wavelet block, encoder, depth-conditioned decoder,
//! coefficient heads and inverse transform.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{self, WaveletPyramid};

use super::adapter::{adapter_forward, depth_encoder};
use super::config::ModelConfig;
use super::layers::Layers;
use super::params::{band_names, ParamStore};

fn check_image(image: &Tensor, cfg: &ModelConfig) -> Result<()> {
    let s = image.shape();
    let m = cfg.required_multiple();
    if s.c != 3 {
        return Err(Error::shape(format!("expected an RGB image, got {s}")));
    }
    if s.h % m != 0 || s.w % m != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::shape(format!(
            "image {}x{} is not a multiple of {m} (pad it first)",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Decompose the image and lift the coarsest sub-bands to `base_channels`
/// features, one convolution per band. The pyramid is returned for the
/// heads and the detail skip path.
pub fn wavelet_transform_block(layers: &Layers, image: &Tensor, cfg: &ModelConfig) -> Result<(Var, WaveletPyramid)> {
    check_image(image, cfg)?;
    let pyramid = wavelet::decompose(image, cfg.levels, cfg.wavelet)?;
    let top = pyramid.top().ok_or_else(|| Error::shape("empty pyramid"))?;
    let t = layers.tape;
    let bands = [&top.ll, &top.lh, &top.hl, &top.hh];
    let mut parts = Vec::new();
    for (name, band) in band_names(cfg.levels).iter().zip(bands) {
        parts.push(layers.conv(&format!("wavelet.{name}"), &t.constant(band.clone()), 1)?);
    }
    let refs: Vec<&Var> = parts.iter().collect();
    Ok((t.concat_channels(&refs)?, pyramid))
}

/// Three residual levels with strided downsampling between them. Skips are
/// the level-1 and level-2 activations taken before each downsample.
pub fn encoder_forward(layers: &Layers, features: &Var, cfg: &ModelConfig) -> Result<(Var, Vec<Var>)> {
    let mut z = features.clone();
    let mut skips = Vec::with_capacity(2);
    for l in 0..3 {
        z = layers.residual_blocks(&format!("encoder.level{}", l + 1), cfg.encoder_blocks[l], z)?;
        if l < 2 {
            skips.push(z.clone());
            z = layers.conv(&format!("encoder.down{}", l + 1), &z, 2)?;
        }
    }
    layers.residual_blocks("bottleneck", cfg.bottleneck_blocks, z)
        .map(|z| (z, skips))
}

/// Decode from the deepest features back to level-1 resolution. With
/// `use_depth`, every level starts with an adapter and depth features are
/// carried upward alongside the image features.
pub fn decoder_forward(
    layers: &Layers,
    deepest: &Var,
    skips: &[Var],
    depth_features: Option<&Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    if skips.len() != 2 {
        return Err(Error::shape(format!("decoder expects 2 skips, got {}", skips.len())));
    }
    let t = layers.tape;
    let mut d = if cfg.use_depth {
        Some(
            depth_features
                .ok_or_else(|| Error::Config("use_depth is set but no depth features were given".into()))?
                .clone(),
        )
    } else {
        None
    };
    let mut z = deepest.clone();
    for (i, l) in (0..3).rev().enumerate() {
        let prefix = format!("decoder.level{}", l + 1);
        if l < 2 {
            z = layers.conv(&format!("{prefix}.fuse"), &t.concat_channels(&[&z, &skips[l]])?, 1)?;
        }
        let mut d_next = None;
        if let Some(dv) = &d {
            let (zo, dn) = adapter_forward(layers, &format!("{prefix}.adapter"), &z, dv)?;
            z = zo;
            d_next = dn;
        }
        z = layers.residual_blocks(&prefix, cfg.decoder_blocks[i], z)?;
        if l > 0 {
            z = layers.conv(&format!("{prefix}.up"), &t.upsample_nearest2x(&z), 1)?;
            if cfg.use_depth {
                let dn = d_next.ok_or_else(|| Error::Config(format!("{prefix}: adapter has no depth output")))?;
                d = Some(layers.conv(&format!("{prefix}.depth_prop"), &t.upsample_nearest2x(&dn), 1)?);
            }
        }
    }
    Ok(z)
}

/// Predict residual coarse-level coefficients, add them to the input's own
/// sub-bands and invert the pyramid with the finer details passed through.
pub fn predict_and_reconstruct(
    layers: &Layers,
    decoded: &Var,
    pyramid: &WaveletPyramid,
    cfg: &ModelConfig,
) -> Result<Var> {
    let t = layers.tape;
    let top = pyramid.top().ok_or_else(|| Error::shape("empty pyramid"))?;
    let mut bands: Vec<Var> = [top.ll, top.lh, top.hl, top.hh].into_iter().map(|b| t.constant(b)).collect();
    for (k, name) in band_names(cfg.levels).iter().enumerate() {
        let pred = layers.conv(&format!("heads.{name}"), decoded, 1)?;
        if pred.shape() != bands[k].shape() {
            return Err(Error::shape(format!(
                "head {name} predicts {} but the band is {}",
                pred.shape(),
                bands[k].shape()
            )));
        }
        bands[k] = t.add(&bands[k], &pred)?;
    }
    let mut x = t.idwt2(&t.concat_channels(&[&bands[0], &bands[1], &bands[2], &bands[3]])?, cfg.wavelet)?;
    for det in pyramid.details.iter().rev().skip(1) {
        let (lh, hl, hh) = (t.constant(det.lh.clone()), t.constant(det.hl.clone()), t.constant(det.hh.clone()));
        x = t.idwt2(&t.concat_channels(&[&x, &lh, &hl, &hh])?, cfg.wavelet)?;
    }
    Ok(x)
}

/// Full network on a batch of RGB images in `[0, 1]`. `depth` is
/// `(n, 1, h_d, w_d)` and is ignored unless `cfg.use_depth`.
pub fn forward(layers: &Layers, image: &Tensor, depth: Option<&Tensor>, cfg: &ModelConfig) -> Result<Var> {
    let (features, pyramid) = wavelet_transform_block(layers, image, cfg)?;
    let (deepest, skips) = encoder_forward(layers, &features, cfg)?;
    let depth_features = if cfg.use_depth {
        let d = depth.ok_or_else(|| Error::Config("model uses depth but no depth map was given".into()))?;
        if d.shape().n != image.shape().n {
            return Err(Error::shape(format!(
                "depth batch {} does not match image batch {}",
                d.shape().n,
                image.shape().n
            )));
        }
        let ds = deepest.shape();
        Some(depth_encoder(layers, &layers.tape.constant(d.clone()), ds.h, ds.w)?)
    } else {
        None
    };
    let decoded = decoder_forward(layers, &deepest, &skips, depth_features.as_ref(), cfg)?;
    predict_and_reconstruct(layers, &decoded, &pyramid, cfg)
}

/// Inference without recording gradients.
pub fn infer(store: &ParamStore, cfg: &ModelConfig, image: &Tensor, depth: Option<&Tensor>) -> Result<Tensor> {
    let tape = Tape::inference();
    let out = forward(&Layers::new(&tape, store), image, depth, cfg)?;
    out.value().ensure_finite("network output")?;
    Ok(out.value().clone())
}

//! Depth encoding and the depth-conditioned feature adapter.

use crate::autodiff::Var;
use crate::error::{Error, Result};

use super::layers::Layers;

/// Lift a one-channel depth map into feature space and align it with a
/// feature grid of `target_h x target_w`.
///
/// The two convolutions run at the depth map's own resolution and the
/// result is bilinearly resampled, so their cost does not depend on the
/// image size.
pub fn depth_encoder(layers: &Layers, depth: &Var, target_h: usize, target_w: usize) -> Result<Var> {
    let s = depth.shape();
    if s.c != 1 {
        return Err(Error::shape(format!("depth map must have one channel, got {s}")));
    }
    let h = layers.conv("depth.conv1", depth, 1)?;
    let h = layers.conv("depth.conv2", &layers.tape.silu(&h), 1)?;
    layers.tape.resize_bilinear(&h, target_h, target_w)
}

/// The adapter's spatial gate, `sigmoid(branch_a(d_n) * branch_b(d_n))`,
/// where `d_n` is the normalised, bias-adjusted depth feature map.
pub fn depth_gate(layers: &Layers, prefix: &str, d: &Var) -> Result<Var> {
    let t = layers.tape;
    let dn = layers.conv(&format!("{prefix}.bias_d"), &layers.norm(&format!("{prefix}.norm_d"), d)?, 1)?;
    // product of the two branches is the second-order term
    let a = layers.conv(&format!("{prefix}.branch_a"), &dn, 1)?;
    let b = layers.conv(&format!("{prefix}.branch_b"), &dn, 1)?;
    Ok(t.sigmoid(&t.mul(&a, &b)?))
}

/// Fuse depth features `d` into image features `z` at one decoder level.
///
/// Returns the updated features and, when the level has a depth
/// attention path (`{prefix}.attn_d`), the depth features to hand on to the
/// next level. The caller upsamples them.
pub fn adapter_forward(layers: &Layers, prefix: &str, z: &Var, d: &Var) -> Result<(Var, Option<Var>)> {
    if z.shape() != d.shape() {
        return Err(Error::shape(format!(
            "adapter {prefix}: image features {} and depth features {} differ",
            z.shape(),
            d.shape()
        )));
    }
    let t = layers.tape;
    let zn = layers.conv(&format!("{prefix}.bias_z"), &layers.norm(&format!("{prefix}.norm_z"), z)?, 1)?;
    let gate = depth_gate(layers, prefix, d)?;
    let z_cond = t.mul(&gate, &zn)?;

    let f = layers.conv(&format!("{prefix}.fusion"), &t.concat_channels(&[&z_cond, z])?, 1)?;
    let z_out = t.add(z, &layers.channel_attention(&format!("{prefix}.attn"), &f)?)?;

    let d_next = if layers.store.contains(&format!("{prefix}.attn_d.reduce.weight")) {
        Some(layers.channel_attention(&format!("{prefix}.attn_d"), d)?)
    } else {
        None
    };
    Ok((z_out, d_next))
}

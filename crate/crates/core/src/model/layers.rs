use crate::autodiff::{Tape, Var};
use crate::error::Result;

use super::params::ParamStore;

/// Binds a tape to a parameter store so layers can be called by name.
#[derive(Clone, Copy)]
pub struct Layers<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
}

impl<'a> Layers<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Layers { tape, store }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.tape.get_leaf(name) {
            return Ok(v);
        }
        Ok(self.tape.leaf(name, self.store.get(name)?))
    }

    /// Convolution `{prefix}.weight` / `{prefix}.bias` with "same" padding.
    pub fn conv(&self, prefix: &str, x: &Var, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let pad = w.shape().h / 2;
        self.tape.conv2d(x, &w, Some(&b), stride, pad)
    }

    pub fn norm(&self, prefix: &str, x: &Var) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        self.tape.channel_norm(x, &scale, &shift)
    }

    /// `z + conv2(silu(conv1(z)))`.
    pub fn residual_block(&self, prefix: &str, z: &Var) -> Result<Var> {
        let h = self.conv(&format!("{prefix}.conv1"), z, 1)?;
        let h = self.conv(&format!("{prefix}.conv2"), &self.tape.silu(&h), 1)?;
        self.tape.add(z, &h)
    }

    pub fn residual_blocks(&self, prefix: &str, count: usize, mut z: Var) -> Result<Var> {
        for b in 0..count {
            z = self.residual_block(&format!("{prefix}.block{b}"), &z)?;
        }
        Ok(z)
    }

    /// `f * sigmoid(expand(silu(reduce(gap(f)))))`, per channel.
    pub fn channel_attention(&self, prefix: &str, f: &Var) -> Result<Var> {
        let t = self.tape;
        let s = t.global_avg_pool(f)?;
        let s = t.silu(&self.conv(&format!("{prefix}.reduce"), &s, 1)?);
        let gate = t.sigmoid(&self.conv(&format!("{prefix}.expand"), &s, 1)?);
        t.mul_channel(f, &gate)
    }
}

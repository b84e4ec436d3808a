use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::wavelet::{WaveletBasis, MAX_LEVELS};

/// Structural hyperparameters of the network.
///
/// Block counts are per feature level. `encoder_blocks` runs shallow to deep;
/// `decoder_blocks` is listed in processing order, deepest level first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub wavelet: WaveletBasis,
    pub use_depth: bool,
    pub encoder_blocks: [usize; 3],
    pub bottleneck_blocks: usize,
    pub decoder_blocks: [usize; 3],
    /// Channel-attention bottleneck divisor.
    pub attention_ratio: usize,
}

pub const PRESETS: [&str; 3] = ["channel16", "channel16-nodepth", "channel32"];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::channel16()
    }
}

impl ModelConfig {
    pub fn channel16() -> Self {
        ModelConfig {
            base_channels: 16,
            levels: 2,
            wavelet: WaveletBasis::Haar,
            use_depth: true,
            encoder_blocks: [1, 1, 12],
            bottleneck_blocks: 0,
            decoder_blocks: [12, 1, 1],
            attention_ratio: 2,
        }
    }

    pub fn channel16_nodepth() -> Self {
        ModelConfig {
            use_depth: false,
            ..Self::channel16()
        }
    }

    pub fn channel32() -> Self {
        ModelConfig {
            base_channels: 32,
            ..Self::channel16()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "channel16" => Some(Self::channel16()),
            "channel16-nodepth" => Some(Self::channel16_nodepth()),
            "channel32" => Some(Self::channel32()),
            _ => None,
        }
    }

    /// Feature widths `(d, 2d, 4d)` of the three encoder levels.
    pub fn level_channels(&self) -> [usize; 3] {
        let d = self.base_channels;
        [d, 2 * d, 4 * d]
    }

    /// Image sides must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        (1 << self.levels) * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be a positive multiple of 4, got {}",
                self.base_channels
            )));
        }
        if !(1..=MAX_LEVELS).contains(&self.levels) {
            return Err(Error::Config(format!("levels must be 1..=3, got {}", self.levels)));
        }
        let r = self.attention_ratio;
        if r == 0 || self.base_channels % r != 0 {
            return Err(Error::Config(format!(
                "attention_ratio {r} must divide base_channels {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Parse line-oriented `key = value` text. An optional `preset` key
    /// selects the starting point; later keys override it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::channel16();
        for (lineno, key, value) in key_values(text)? {
            let bad = |what: &str| Error::Config(format!("line {lineno}: {key}: {what} '{value}'"));
            match key {
                "preset" => cfg = Self::preset(value).ok_or_else(|| bad("unknown preset"))?,
                "base_channels" => cfg.base_channels = value.parse().map_err(|_| bad("not an integer"))?,
                "levels" => cfg.levels = value.parse().map_err(|_| bad("not an integer"))?,
                "wavelet" => cfg.wavelet = value.parse().map_err(|_| bad("unknown basis"))?,
                "use_depth" => cfg.use_depth = parse_bool(value).ok_or_else(|| bad("not a boolean"))?,
                "encoder_blocks" => cfg.encoder_blocks = parse_triple(value).ok_or_else(|| bad("expected a,b,c"))?,
                "bottleneck_blocks" => cfg.bottleneck_blocks = value.parse().map_err(|_| bad("not an integer"))?,
                "decoder_blocks" => cfg.decoder_blocks = parse_triple(value).ok_or_else(|| bad("expected a,b,c"))?,
                "attention_ratio" => cfg.attention_ratio = value.parse().map_err(|_| bad("not an integer"))?,
                _ => return Err(Error::Config(format!("line {lineno}: unknown key '{key}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name, or a path to a `key = value` file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let triple = |t: [usize; 3]| format!("{},{},{}", t[0], t[1], t[2]);
        let _ = writeln!(s, "base_channels = {}", self.base_channels);
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "wavelet = {}", self.wavelet);
        let _ = writeln!(s, "use_depth = {}", self.use_depth);
        let _ = writeln!(s, "encoder_blocks = {}", triple(self.encoder_blocks));
        let _ = writeln!(s, "bottleneck_blocks = {}", self.bottleneck_blocks);
        let _ = writeln!(s, "decoder_blocks = {}", triple(self.decoder_blocks));
        let _ = writeln!(s, "attention_ratio = {}", self.attention_ratio);
        s
    }
}

/// Split `key = value` lines, skipping blanks and `#` comments.
pub(crate) fn key_values(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

pub(crate) fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_triple(v: &str) -> Option<[usize; 3]> {
    let parts: Vec<usize> = v.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    parts.try_into().ok()
}

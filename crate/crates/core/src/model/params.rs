use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Named learnable tensors in a fixed, deterministic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Check that `self` has exactly the names and shapes of `schema`.
    pub fn check_against(&self, schema: &[ParamSpec]) -> Result<()> {
        let unknown: Vec<&str> = self
            .names()
            .filter(|n| !schema.iter().any(|s| s.name == *n))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown parameters: {}", unknown.join(", "))));
        }
        for spec in schema {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(Error::shape(format!(
                    "parameter '{}' has shape {}, expected {}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

#[derive(Default)]
struct SchemaBuilder {
    specs: Vec<ParamSpec>,
}

impl SchemaBuilder {
    fn push(&mut self, name: String, shape: Shape, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        let fan_in = c_in * k * k;
        self.push(format!("{name}.weight"), Shape::new(c_out, c_in, k, k), Init::FanIn(fan_in));
        self.push(format!("{name}.bias"), Shape::new(1, c_out, 1, 1), Init::Zeros);
    }

    fn zero_conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        self.push(format!("{name}.weight"), Shape::new(c_out, c_in, k, k), Init::Zeros);
        self.push(format!("{name}.bias"), Shape::new(1, c_out, 1, 1), Init::Zeros);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.scale"), Shape::new(1, c, 1, 1), Init::Ones);
        self.push(format!("{name}.shift"), Shape::new(1, c, 1, 1), Init::Zeros);
    }

    fn blocks(&mut self, prefix: &str, c: usize, count: usize) {
        for b in 0..count {
            self.conv(&format!("{prefix}.block{b}.conv1"), c, c, 3);
            self.conv(&format!("{prefix}.block{b}.conv2"), c, c, 3);
        }
    }

    fn attention(&mut self, prefix: &str, c: usize, ratio: usize) {
        self.conv(&format!("{prefix}.reduce"), c, c / ratio, 1);
        self.conv(&format!("{prefix}.expand"), c / ratio, c, 1);
    }

    fn adapter(&mut self, prefix: &str, c: usize, ratio: usize, propagate: bool) {
        self.norm(&format!("{prefix}.norm_z"), c);
        self.norm(&format!("{prefix}.norm_d"), c);
        self.conv(&format!("{prefix}.bias_z"), c, c, 1);
        self.conv(&format!("{prefix}.bias_d"), c, c, 1);
        self.conv(&format!("{prefix}.branch_a"), c, c, 3);
        self.conv(&format!("{prefix}.branch_b"), c, c, 3);
        self.zero_conv(&format!("{prefix}.fusion"), 2 * c, c, 3);
        self.attention(&format!("{prefix}.attn"), c, ratio);
        if propagate {
            self.attention(&format!("{prefix}.attn_d"), c, ratio);
        }
    }
}

/// Names of the wavelet sub-band branches processed by the network.
pub fn band_names(levels: usize) -> &'static [&'static str] {
    if levels == 1 {
        &["ll"]
    } else {
        &["ll", "lh", "hl", "hh"]
    }
}

/// The full parameter layout implied by `cfg`, in forward order.
pub fn schema(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = SchemaBuilder::default();
    let ch = cfg.level_channels();
    let bands = band_names(cfg.levels);
    let per_band = ch[0] / bands.len();
    for band in bands {
        s.conv(&format!("wavelet.{band}"), 3, per_band, 3);
    }
    for l in 0..3 {
        s.blocks(&format!("encoder.level{}", l + 1), ch[l], cfg.encoder_blocks[l]);
        if l < 2 {
            s.conv(&format!("encoder.down{}", l + 1), ch[l], ch[l + 1], 3);
        }
    }
    s.blocks("bottleneck", ch[2], cfg.bottleneck_blocks);
    if cfg.use_depth {
        s.conv("depth.conv1", 1, ch[2], 3);
        s.conv("depth.conv2", ch[2], ch[2], 3);
    }
    for (i, l) in (0..3).rev().enumerate() {
        let prefix = format!("decoder.level{}", l + 1);
        if l < 2 {
            s.conv(&format!("{prefix}.fuse"), 2 * ch[l], ch[l], 1);
        }
        if cfg.use_depth {
            s.adapter(&format!("{prefix}.adapter"), ch[l], cfg.attention_ratio, l > 0);
        }
        s.blocks(&prefix, ch[l], cfg.decoder_blocks[i]);
        if l > 0 {
            s.conv(&format!("{prefix}.up"), ch[l], ch[l - 1], 3);
            if cfg.use_depth {
                s.conv(&format!("{prefix}.depth_prop"), ch[l], ch[l - 1], 3);
            }
        }
    }
    for band in bands {
        s.zero_conv(&format!("heads.{band}"), ch[0], 3, 3);
    }
    s.specs
}

/// Deterministic initialisation: fan-in scaled uniform conv weights, zero
/// biases, unit norm scales, and zero output heads and adapter fusion convs
/// so that the untrained network is the identity.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in schema(cfg) {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(spec.shape),
            Init::Ones => Tensor::full(spec.shape, 1.0),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-b, b);
                let data = (0..spec.shape.numel()).map(|_| dist.sample(&mut rng)).collect();
                Tensor::from_vec(spec.shape, data)?
            }
        };
        store.insert(spec.name, t)?;
    }
    Ok(store)
}

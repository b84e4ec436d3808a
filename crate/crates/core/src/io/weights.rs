//! Weight container: little-endian, self-describing list of named tensors.
//!
//! ```text
//! "EDBW" | version u32 = 1 | count u32
//! count x ( name_len u32 | name utf-8 | rank u8 | dims rank x u32 | f32 data )
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{schema, ModelConfig, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"EDBW";
pub const VERSION: u32 = 1;

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decode a container; `path` is used only in error messages.
pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "not a weight container (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported container version {version}")));
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::format(path, format!("tensor {i}: name is not utf-8")))?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        if rank > 4 {
            return Err(Error::format(path, format!("tensor '{name}': rank {rank} exceeds 4")));
        }
        let mut dims = [1usize; 4];
        for k in 0..rank {
            dims[4 - rank + k] = c.u32("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let numel = shape.numel();
        let raw = c.take(numel * 4, &format!("data of '{name}'"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn save_weights(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_tensors(store.iter())).map_err(|e| Error::io(path, e))
}

/// Read every tensor in the file into a store, in file order.
pub fn load_weights(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut store = ParamStore::new();
    for (name, t) in decode_tensors(&bytes, path)? {
        store.insert(name, t).map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(store)
}

/// Load weights and check them against the layout of `cfg`. Unknown names
/// and missing or misshapen tensors are errors.
pub fn load_model_weights(path: &Path, cfg: &ModelConfig) -> Result<ParamStore> {
    let raw = load_weights(path)?;
    let specs = schema(cfg);
    raw.check_against(&specs).map_err(|e| Error::format(path, e.to_string()))?;
    // re-order to the schema so iteration order is canonical
    let mut store = ParamStore::new();
    for spec in specs {
        store.insert(spec.name.clone(), raw.get(&spec.name)?.clone())?;
    }
    Ok(store)
}

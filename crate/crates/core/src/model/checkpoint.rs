//! Binary checkpoint format.
//!
//! ```text
//! "ICSG" | version u32 | config_len u32 | config JSON | tensor_count u32 |
//! per tensor: name_len u32 | name | rank u32 | dims u64* | values f32*
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::vit::ModelState;
use super::ModelError;

pub const MAGIC: &[u8; 4] = b"ICSG";
pub const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn to_bytes(model: &ModelState<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.param_count() * 4 + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let tensors = &model.layout().tensors;
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &s in &t.shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in &model.params()[t.range.clone()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint. With `expected`, refuses one built for a different
/// configuration.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelState<f32>, ModelError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(cfg_len)?).map_err(|e| corrupt(format!("config header: {e}")))?;
    config.validate()?;
    if let Some(exp) = expected {
        // the seed only matters for initialization
        if (ModelConfig {
            seed: exp.seed,
            pos_init: exp.pos_init,
            ..config
        }) != *exp
        {
            return Err(ModelError::ConfigMismatch(format!("checkpoint has {config:?}, expected {exp:?}")));
        }
    }
    let template = ModelState::<f32>::from_params(config, vec![0.0; config.param_count()])?;
    let layout = template.layout();
    let count = c.u32()? as usize;
    if count != layout.tensors.len() {
        return Err(corrupt(format!("expected {} tensors, found {count}", layout.tensors.len())));
    }
    let mut params = vec![0f32; layout.total];
    for t in &layout.tensors {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        if name != t.name {
            return Err(corrupt(format!("expected tensor {}, found {name}", t.name)));
        }
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        if shape != t.shape {
            return Err(corrupt(format!("tensor {name}: shape {shape:?}, expected {:?}", t.shape)));
        }
        let raw = c.take(t.range.len() * 4)?;
        for (dst, chunk) in params[t.range.clone()].iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if c.pos != bytes.len() {
        return Err(corrupt("trailing bytes after last tensor"));
    }
    ModelState::from_params(config, params)
}

/// Writes atomically (temp file then rename).
pub fn save(model: &ModelState<f32>, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelState<f32>, ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes, expected)
}

//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "GPDITCKP" | version u16 | config_len u32 | config (JSON)
//! count u32 | count × { name_len u16 | name | ndim u8 | dims u32… | f32 data }
//! ```

use super::{param_specs, tensor_count, GPDiTModel, ModelConfig, ModelError};
use crate::tensor::{Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPDITCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint<T: Float>(model: &GPDiTModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (spec, p) in model.specs().iter().zip(model.params()) {
        out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.push(p.shape().len() as u8);
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.data() {
            out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> ModelError {
        ModelError::Checkpoint { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses and validates a checkpoint; every tensor must match the inventory
/// implied by the stored config.
pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<GPDiTModel<T>, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint { offset: 0, msg: "bad magic string".into() });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint { offset: 8, msg: format!("unsupported version {version}") });
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?).map_err(|e| ModelError::Checkpoint { offset: at, msg: format!("config: {e}") })?;
    config.validate().map_err(|e| ModelError::Checkpoint { offset: at, msg: e.to_string() })?;
    let count = r.u32("tensor count")? as usize;
    let expected = tensor_count(&config);
    if count != expected {
        return Err(r.err(format!("expected {expected} tensors, found {count}")));
    }
    let specs = param_specs(&config);
    let mut params = Vec::with_capacity(count);
    for spec in &specs {
        let n = r.u16("name length")? as usize;
        let name = r.take(n, "name")?;
        if name != spec.name.as_bytes() {
            return Err(r.err(format!("expected tensor {}, found {}", spec.name, String::from_utf8_lossy(name))));
        }
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        if shape != spec.shape {
            return Err(r.err(format!("tensor {} has shape {shape:?}, expected {:?}", spec.name, spec.shape)));
        }
        let raw = r.take(spec.numel() * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        params.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last tensor"));
    }
    GPDiTModel::from_params(config, params)
}

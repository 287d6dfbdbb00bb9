//! Self-contained binary checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic `ADCL` | version u32 | digest (u32 len + utf8) |
//!   config text (u32 len + utf8) | tensor count u32 | entries…
//! Each entry: name (u16 len + utf8), dtype tag u8 (0 = f64), ndim u8,
//! dims u32…, payload f64 LE. Entries cover every parameter, frozen and
//! trainable, plus one `vel.<name>` per trainable parameter, so a
//! checkpoint restores model and optimizer bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::training::Optimizer;
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 4] = b"ADCL";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Decoded checkpoint contents.
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: String,
    pub config_text: String,
    pub tensors: BTreeMap<String, Tensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize model parameters and optimizer velocities.
pub fn checkpoint_bytes(model: &Model, optimizer: &Optimizer, config: &RunConfig) -> Vec<u8> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    model.visit(&mut |p| entries.push((p.name.clone(), p.value.clone())));
    model.visit(&mut |p| {
        if p.trainable {
            let vel = optimizer
                .velocities
                .get(&p.name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            entries.push((format!("vel.{}", p.name), vel));
        }
    });

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &config.digest());
    put_str(&mut out, &config.to_text());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in &entries {
        put_tensor(&mut out, name, tensor);
    }
    out
}

pub fn save_checkpoint(
    model: &Model,
    optimizer: &Optimizer,
    config: &RunConfig,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, optimizer, config))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!("truncated {what}"), self.pos as u64));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(format!("non-utf8 {what}"), self.pos as u64))
    }
}

/// Decode a checkpoint byte stream.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}"), 0));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}"), 4));
    }
    let config_digest = r.string("config digest")?;
    let config_text = r.string("config text")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::format("non-utf8 tensor name", r.pos as u64))?;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::format(format!("unsupported dtype tag {dtype}"), r.pos as u64));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after tensor table", r.pos as u64));
    }
    Ok(Checkpoint { version, config_digest, config_text, tensors })
}

/// Load a checkpoint into a freshly built model and optimizer. Every
/// parameter is overwritten from the tensor table, so the result is
/// bit-identical to the saved state.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Optimizer, RunConfig)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    restore_checkpoint(&bytes)
}

pub fn restore_checkpoint(bytes: &[u8]) -> Result<(Model, Optimizer, RunConfig)> {
    let ckpt = parse_checkpoint(bytes)?;
    let config = RunConfig::from_text(&ckpt.config_text)?;
    if config.digest() != ckpt.config_digest {
        return Err(Error::format("config digest does not match embedded config", 8));
    }
    let mut model = Model::new(config.model.clone(), Vocabulary::builtin())?;
    let mut missing = Vec::new();
    model.visit_mut(&mut |p| match ckpt.tensors.get(&p.name) {
        Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
        Some(t) => missing.push(format!("{} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())),
        None => missing.push(format!("{} absent", p.name)),
    });
    if !missing.is_empty() {
        return Err(Error::format(format!("checkpoint incomplete: {}", missing.join("; ")), 0));
    }
    let mut optimizer = Optimizer::new();
    for (name, tensor) in &ckpt.tensors {
        if let Some(stripped) = name.strip_prefix("vel.") {
            optimizer.velocities.insert(stripped.to_string(), tensor.clone());
        }
    }
    Ok((model, optimizer, config))
}

//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   b"DVITCKPT"
//! version   u32       1
//! config    u32 len + UTF-8 `key=value` lines (ModelConfig)
//! dtype     u8        4 = f32, 8 = f64
//! count     u32       number of tensors
//! tensor*   u32 name len, name bytes, u32 ndim, ndim x u64 dims, raw values
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::{Element, Tensor};

use super::{ModelConfig, ModelError, Vit};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DVITCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Element>(model: &Vit<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = model.config.to_kv();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.push(std::mem::size_of::<T>() as u8);
    let params = model.named_parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        T::to_le_bytes_vec(tensor.data(), &mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(ModelError::Checkpoint(format!(
                "truncated while reading {what} at offset {}",
                self.offset
            )));
        };
        let slice = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<Vit<T>, ModelError> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| ModelError::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let config = ModelConfig::from_kv(text)?;
    let width = r.take(1, "dtype")?[0] as usize;
    if width != 4 && width != 8 {
        return Err(ModelError::Checkpoint(format!("unknown dtype width {width}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut model = Vit::<T>::init(&config, 0)?;
    let expected = model.named_parameters();
    if count != expected.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (want_name, want) in &expected {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| ModelError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        if name != want_name {
            return Err(ModelError::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dim")? as usize);
        }
        if shape != want.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                want.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * width, name)?;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        values.push(Tensor::from_vec(&shape, data)?);
    }
    if r.offset != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.offset
        )));
    }
    model.set_parameters(values)?;
    Ok(model)
}

pub fn save_checkpoint<T: Element>(model: &Vit<T>, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Vit<T>, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}

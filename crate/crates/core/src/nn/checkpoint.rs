//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "BGSN" | version u32 | precision u8 (0 = f32, 1 = f64)
//! | arch_len u32 | architecture JSON | seed u64
//! | tensor_count u32 | per tensor: name_len u16, name, ndim u8, dims u32 x ndim
//! | optimizer u8 (0/1)
//! | tensor data in manifest order
//! | if optimizer: one accumulator per trainable tensor, in parameter order
//! ```
//!
//! The manifest is checked against the layer chain implied by the stored
//! architecture before any data is read.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Architecture, Model, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BGSN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn precision_name(flag: u8) -> &'static str {
    match flag {
        0 => "f32",
        1 => "f64",
        _ => "unknown",
    }
}

pub fn encode_checkpoint<S: Scalar>(model: &Model<S>, optimizer: Option<&[Tensor<S>]>) -> Vec<u8> {
    let named = model.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(S::PRECISION_FLAG);
    let arch = serde_json::to_vec(model.architecture()).expect("architecture serializes");
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&model.seed().to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    out.push(u8::from(optimizer.is_some()));
    for (_, t) in &named {
        for &v in t.data() {
            v.extend_le(&mut out);
        }
    }
    if let Some(acc) = optimizer {
        for t in acc {
            for &v in t.data() {
                v.extend_le(&mut out);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn fill<S: Scalar>(&mut self, t: &mut Tensor<S>, what: &str) -> Result<()> {
        let raw = self.take(t.len() * S::BYTES, what)?;
        for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(S::BYTES)) {
            *v = S::from_le(b);
        }
        Ok(())
    }
}

/// Decodes a checkpoint; returns the model and, when present, the optimizer
/// accumulators.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<(Model<S>, Option<Vec<Tensor<S>>>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let precision = r.u8("precision")?;
    if precision != S::PRECISION_FLAG {
        return Err(Error::PrecisionMismatch {
            found: precision_name(precision),
            expected: S::NAME,
        });
    }
    let arch_len = r.u32("architecture length")? as usize;
    let arch: Architecture = serde_json::from_slice(r.take(arch_len, "architecture")?)
        .map_err(|e| Error::Corrupt(format!("checkpoint architecture: {e}")))?;
    let seed = r.u64("seed")?;
    let mut model = Model::<S>::zeros(&arch)
        .map_err(|e| Error::Corrupt(format!("checkpoint architecture: {e}")))?;
    model.set_seed(seed);

    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint lists {count} tensors, architecture needs {}",
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let len = r.u16("tensor name")? as usize;
        let found_name = String::from_utf8_lossy(r.take(len, "tensor name")?).into_owned();
        let ndim = r.u8("tensor rank")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &found_name != name || &dims != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.clone(),
                found: dims,
            });
        }
    }
    let has_optimizer = match r.u8("optimizer flag")? {
        0 => false,
        1 => true,
        v => return Err(Error::Corrupt(format!("optimizer flag {v}"))),
    };
    for t in model.persisted_tensors_mut() {
        r.fill(t, "tensor data")?;
    }
    let optimizer = if has_optimizer {
        let mut acc: Vec<Tensor<S>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        for t in &mut acc {
            r.fill(t, "optimizer state")?;
        }
        Some(acc)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok((model, optimizer))
}

pub fn save_model<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, None)).map_err(|e| Error::io(path, e))
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?.0)
}

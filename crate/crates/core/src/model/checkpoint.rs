//! Binary checkpoint format.
//!
//! ```text
//! "CNFT" | u32 version | u32 len + config JSON | u64 step | u32 len + RNG JSON
//! | u32 param count | per param: u16 name len, name, u8 ndim, u64 dims...
//! | per param: f64 LE values | 32-byte SHA-256 of everything before it
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNFT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(detail) => Error::Corrupt {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })
}

pub(crate) fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(model.param_count() * 8 + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&model.step().to_le_bytes());
    let rng = serde_json::to_vec(model.rng())?;
    out.extend_from_slice(&(rng.len() as u32).to_le_bytes());
    out.extend_from_slice(&rng);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in model.params() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 + 32 {
        return Err(Error::Checkpoint(format!(
            "file is only {} bytes long",
            bytes.len()
        )));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint(
            "checksum mismatch (file is truncated or corrupted)".into(),
        ));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let n = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let step = r.u64("step")?;
    let n = r.u32("rng length")? as usize;
    let rng: ChaCha8Rng = serde_json::from_slice(r.take(n, "rng state")?)
        .map_err(|e| Error::Checkpoint(format!("bad rng state: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        shapes.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (_, shape) in &shapes {
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8, "parameter data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameter data",
            body.len() - r.pos
        )));
    }
    let model = Model::from_parts(config, tensors, step, rng)?;
    for (p, (name, _)) in model.params().iter().zip(&shapes) {
        if &p.name != name {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} found where {:?} was expected",
                p.name
            )));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use rand::RngCore;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::new(tiny_config()).unwrap();
        m.set_step(42);
        m.rng_mut().next_u64();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let mut back = load_checkpoint(&path).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.step(), 42);
        assert_eq!(back.config(), m.config());
        assert_eq!(back.rng_mut().next_u64(), m.rng_mut().next_u64());
    }

    #[test]
    fn truncation_and_corruption_are_descriptive() {
        let m = Model::new(tiny_config()).unwrap();
        let bytes = encode(&m).unwrap();
        let err = decode(&bytes[..bytes.len() / 2]).unwrap_err().to_string();
        assert!(err.contains("checksum") || err.contains("truncated"), "{err}");
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(decode(&flipped).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let m = Model::new(tiny_config()).unwrap();
        let mut bytes = encode(&m).unwrap();
        bytes[4] = 9;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn corrupt_file_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"CNFT\x01\x00\x00\x00garbage").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("bad.ckpt"));
    }
}

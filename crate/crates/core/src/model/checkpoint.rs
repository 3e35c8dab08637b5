//! Binary checkpoint: all little-endian.
//!
//! ```text
//! magic    b"HVCK"
//! version  u32
//! config   u32 byte length, UTF-8 key = value text
//! step     u64 optimizer step (0 without optimizer state)
//! count    u32 number of tensor records
//! record   u32 name length, name bytes, u8 dtype (0 = f64), u8 frozen,
//!          u32 rank, rank × u64 dims, product(dims) × f64
//! digest   32-byte SHA-256 of every preceding byte
//! ```
//!
//! Optimizer moments are records named `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::numkernel::{AdamState, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"HVCK";
const DTYPE_F64: u8 = 0;

/// A model with optional optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, frozen: bool, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE_F64);
    buf.push(u8::from(frozen));
    put_u32(buf, t.shape().len() as u32);
    for &s in t.shape() {
        buf.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(model: &Model, optimizer: Option<&AdamState>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let config = model.config.to_kv();
    put_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(config.as_bytes());
    buf.extend_from_slice(&optimizer.map_or(0, |o| o.step).to_le_bytes());
    let n = model.store.len() * if optimizer.is_some() { 3 } else { 1 };
    put_u32(&mut buf, n as u32);
    for (_, p) in model.store.iter() {
        put_record(&mut buf, &p.name, p.frozen, &p.value);
    }
    if let Some(o) = optimizer {
        if o.m.len() != model.store.len() || o.v.len() != model.store.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        for (kind, moments) in [("m", &o.m), ("v", &o.v)] {
            for ((_, p), t) in model.store.iter().zip(moments) {
                put_record(&mut buf, &format!("adam.{kind}.{}", p.name), false, t);
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<(String, bool, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("tensor name at byte {} is not UTF-8", self.pos)))?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype tag {dtype}")));
        }
        let frozen = match self.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Checkpoint(format!("{name}: frozen flag {f}"))),
        };
        let rank = self.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| self.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s)).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, frozen, t))
    }
}

/// Loads a checkpoint; with `expected`, a differing stored config is an error.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint(format!("{} bytes is too short to be a checkpoint", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch: file is truncated or corrupted".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let clen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(clen)?).map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let map = KvMap::parse(text)?;
    map.reject_unknown(ModelConfig::keys())?;
    let config = ModelConfig::from_kv(&map)?;
    if let Some(exp) = expected {
        if exp != &config {
            let want = KvMap::parse(&exp.to_kv())?;
            let diff: Vec<String> = ModelConfig::keys()
                .iter()
                .filter(|k| want.get(k) != map.get(k))
                .map(|k| format!("{k}: file {:?}, expected {:?}", map.get(k).unwrap_or(""), want.get(k).unwrap_or("")))
                .collect();
            return Err(Error::ConfigMismatch(diff.join("; ")));
        }
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut model = Model::new(config)?;
    let n = model.store.len();
    if count != n && count != 3 * n {
        return Err(Error::Checkpoint(format!("{count} tensors for a model with {n} parameters")));
    }
    let mut moments: Vec<Tensor> = Vec::new();
    for i in 0..count {
        let (name, frozen, t) = r.record()?;
        if i < n {
            let id = model.store.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if id.0 != i {
                return Err(Error::Checkpoint(format!("tensor {name} out of order")));
            }
            model.store.set_value(id, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
            model.store.set_frozen(id, frozen);
        } else {
            let kind = if i < 2 * n { "m" } else { "v" };
            let owner = &model.store.get(crate::numkernel::ParamId(i % n)).name;
            if name != format!("adam.{kind}.{owner}") || t.shape() != model.store.get(crate::numkernel::ParamId(i % n)).value.shape() {
                return Err(Error::Checkpoint(format!("unexpected optimizer record {name}")));
            }
            moments.push(t);
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let optimizer = (count == 3 * n).then(|| {
        let v = moments.split_off(n);
        AdamState { step, m: moments, v }
    });
    Ok(Checkpoint { model, optimizer })
}

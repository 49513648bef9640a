//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "AGCK" | u32 version | u32 count
//! per tensor: u16 name_len | name | u8 group | u8 dtype (0 = f32) | u8 rank | u64 dims[rank] | f32 data
//! ```
//!
//! The model configuration travels next to the checkpoint as `<path>.cfg`.

use std::path::{Path, PathBuf};

use crate::config::{KvConfig, ModelConfig};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};

pub const MAGIC: &[u8; 4] = b"AGCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", e.name)))?;
        let rank = u8::try_from(e.tensor.rank()).map_err(|_| Error::Checkpoint(format!("{}: rank too large", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.group.code());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in e.tensor.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))),
        }
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
}

/// Parses a whole checkpoint; nothing is returned unless every tensor
/// decodes.
pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an AGCK checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let group = Group::from_code(r.u8("group")?).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown group")))?;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64("dims")?).map_err(|_| Error::Checkpoint(format!("{name}: dim overflow")))?);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let raw = r.take(n, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.insert(&name, Tensor::new(dims, data)?, group)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Strict load into a store of known layout: every name must exist in the
/// target with identical dims and group, and every target tensor must be
/// present. The target is unchanged on error.
pub fn load_into(target: &mut ParamStore<f32>, loaded: &ParamStore<f32>) -> Result<()> {
    for e in loaded.entries() {
        let i = target
            .position(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {:?} in checkpoint", e.name)))?;
        let t = &target.entries()[i];
        if t.tensor.dims() != e.tensor.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?}: checkpoint dims {:?} do not match model dims {:?}",
                e.name,
                e.tensor.dims(),
                t.tensor.dims()
            )));
        }
        if t.group != e.group {
            return Err(Error::Checkpoint(format!("tensor {:?}: group {} != {}", e.name, e.group.name(), t.group.name())));
        }
    }
    if let Some(missing) = target.entries().iter().find(|t| loaded.position(&t.name).is_none()) {
        return Err(Error::Checkpoint(format!("checkpoint lacks tensor {:?}", missing.name)));
    }
    for e in loaded.entries() {
        target.set(&e.name, e.tensor.clone())?;
    }
    Ok(())
}

pub fn config_path(ckpt: impl AsRef<Path>) -> PathBuf {
    let mut s = ckpt.as_ref().as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Writes the checkpoint and its resolved configuration side by side.
pub fn save_model(store: &ParamStore<f32>, kv: &KvConfig, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(store, path.as_ref())?;
    kv.write(config_path(path))
}

/// Loads a checkpoint together with the model configuration saved beside
/// it, checking every tensor against that configuration.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelConfig, KvConfig, ParamStore<f32>)> {
    let kv = KvConfig::read(config_path(path.as_ref()))?;
    let cfg = ModelConfig::from_kv(&kv)?;
    let loaded = load_checkpoint(path)?;
    let mut store = crate::ditnet::init_params(&cfg, 0)?;
    load_into(&mut store, &loaded)?;
    Ok((cfg, kv, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ditnet::init_params;

    fn tiny() -> ModelConfig {
        ModelConfig { d: 16, blocks: 1, heads: 2, text_heads: 2, dem_heads: 2, lora_rank: 2, image_side: 8, redux_tokens: 4, ..Default::default() }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let store = init_params(&tiny(), 3).unwrap();
        let a = dir.path().join("a.agck");
        let b = dir.path().join("b.agck");
        save_checkpoint(&store, &a).unwrap();
        let back = load_checkpoint(&a).unwrap();
        save_checkpoint(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        for (x, y) in store.entries().iter().zip(back.entries()) {
            assert_eq!((&x.name, x.group), (&y.name, y.group));
            assert!(x.tensor.bit_eq(&y.tensor));
        }
    }

    #[test]
    fn header_layout() {
        let store = init_params(&tiny(), 0).unwrap();
        let bytes = encode(&store).unwrap();
        assert_eq!(&bytes[..4], b"AGCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, store.len());
        let first = &store.entries()[0];
        let len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + len], first.name.as_bytes());
        let expected: usize = 12
            + store.entries().iter().map(|e| 2 + e.name.len() + 3 + 8 * e.tensor.rank() + 4 * e.tensor.numel()).sum::<usize>();
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn corrupt_magic_and_truncation_are_errors() {
        let store = init_params(&tiny(), 0).unwrap();
        let mut bytes = encode(&store).unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(decode(&v2).is_err());
        for cut in [3, 11, 13, good.len() / 2, good.len() - 1] {
            assert!(decode(&good[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn mismatched_config_names_the_tensor() {
        let store = init_params(&tiny(), 0).unwrap();
        let wider = ModelConfig { d: 24, heads: 2, text_heads: 2, dem_heads: 2, ..tiny() };
        let mut target = init_params(&wider, 0).unwrap();
        let before = target.clone();
        let err = load_into(&mut target, &store).unwrap_err().to_string();
        assert!(err.contains("text.embed") && err.contains("dims"), "{err}");
        assert!(target.group_bit_eq(&before, Group::Base));
        let deeper = ModelConfig { blocks: 2, ..tiny() };
        let mut target = init_params(&deeper, 0).unwrap();
        let err = load_into(&mut target, &store).unwrap_err().to_string();
        assert!(err.contains("blocks.1"), "{err}");
        let mut small = init_params(&tiny(), 1).unwrap();
        let mut big = ParamStore::new();
        for e in store.entries() {
            big.insert(&e.name, e.tensor.clone(), e.group).unwrap();
        }
        big.insert("extra", Tensor::zeros([1]), Group::Base).unwrap();
        let err = load_into(&mut small, &big).unwrap_err().to_string();
        assert!(err.contains("unknown tensor \"extra\""), "{err}");
    }

    #[test]
    fn model_roundtrip_with_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let store = init_params(&cfg, 4).unwrap();
        let mut kv = KvConfig::new();
        cfg.write_kv(&mut kv);
        let path = dir.path().join("m.agck");
        save_model(&store, &kv, &path).unwrap();
        let (c2, _, s2) = load_model(&path).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(encode(&s2).unwrap(), encode(&store).unwrap());
    }
}

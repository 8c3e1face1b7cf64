//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "BSGCKPT\0"
//! version    u32
//! config     u32 length + UTF-8 JSON model configuration
//! count      u32
//! count × {  u32 name length, UTF-8 name,
//!            u32 rank, rank × u64 dims,
//!            product(dims) × f64 }
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BSGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(model_config: serde_json::Value, store: &ParamStore) -> Self {
        let arrays = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.value(id).clone()))
            .collect();
        Self {
            format_version: CHECKPOINT_VERSION,
            model_config,
            arrays,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.format_version.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.model_config)?;
        write_len(&mut w, cfg.len())?;
        w.write_all(&cfg)?;
        write_len(&mut w, self.arrays.len())?;
        for (name, t) in &self.arrays {
            write_len(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_len(&mut w, t.shape().len())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let format_version = read_u32(&mut r)?;
        if format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {format_version}"
            )));
        }
        let cfg = read_bytes(&mut r)?;
        let model_config = serde_json::from_slice(&cfg)?;
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|e| Error::Checkpoint(format!("array name: {e}")))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            arrays.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self {
            format_version,
            model_config,
            arrays,
        })
    }

    /// Copies every array into the same-named parameter; names and shapes
    /// must match the store exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.arrays.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, model has {}",
                self.arrays.len(),
                store.len()
            )));
        }
        for (name, t) in &self.arrays {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            store
                .replace_value(id, t.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint("length overflows u32".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn round_trip_is_exact() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(4);
        store.register_uniform("a.w", &[3, 5], 1.0, &mut rng).unwrap();
        store.register("b", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300])).unwrap();
        let ck = Checkpoint::from_store(serde_json::json!({"dim": 32}), &store);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let mut fresh = ParamStore::new();
        fresh.register("a.w", Tensor::zeros(&[3, 5])).unwrap();
        fresh.register("b", Tensor::zeros(&[3])).unwrap();
        back.load_into(&mut fresh).unwrap();
        assert_eq!(fresh.value(fresh.id("a.w").unwrap()), store.value(store.id("a.w").unwrap()));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[2])).unwrap();
        let ck = Checkpoint::from_store(serde_json::Value::Null, &store);
        let mut other = ParamStore::new();
        other.register("w", Tensor::zeros(&[3])).unwrap();
        assert!(ck.load_into(&mut other).is_err());
        assert!(Checkpoint::read(&b"NOTACKPT"[..]).is_err());
    }
}

//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//! `"FDTR"`, `u32` version, then per parameter until EOF:
//! `u32` name length, UTF-8 name, `u8` frozen flag, `u32` rank,
//! `rank × u64` dims, `numel × f64` data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FDTR";
pub const VERSION: u32 = 1;

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.frozen as u8);
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while r.pos < buf.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_owned();
        let frozen = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad frozen flag {b} for {name}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if store.id_of(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.add(name, tensor, frozen);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    from_bytes(&fs::read(path)?)
}

/// Copies values (and frozen flags) from `src` into same-named tensors of `dst`.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for p in dst.iter_mut() {
        let id = src
            .id_of(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
        let s = src.get(id);
        if s.tensor.shape() != p.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                p.name,
                s.tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor.data_mut().copy_from_slice(s.tensor.data());
        p.frozen = s.frozen;
        p.tensor.requires_grad = !s.frozen;
        p.tensor.grad = None;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::from_vec(vec![1.0]), true);
        let b = to_bytes(&store);
        assert_eq!(&b[..4], b"FDTR");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(b[12], b'a');
        assert_eq!(b[13], 1);
        assert_eq!(b.len(), 4 + 4 + 4 + 1 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"NOPE\x01\0\0\0").is_err());
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(&[3]), false);
        let b = to_bytes(&store);
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                (prop::collection::vec(1usize..4, 1..4), any::<bool>(), any::<u64>()),
                0..5,
            )
        ) {
            let mut store = ParamStore::new();
            for (i, (shape, frozen, seed)) in tensors.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|k| f64::from_bits(seed.wrapping_mul(k as u64 + 1) & 0x7fef_ffff_ffff_ffff)).collect();
                store.add(format!("p{i}.weight"), Tensor::new(shape, data).unwrap(), *frozen);
            }
            let bytes = to_bytes(&store);
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(to_bytes(&back), bytes);
            for (a, b) in store.iter().zip(back.iter()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.frozen, b.frozen);
                prop_assert_eq!(a.tensor.to_bits(), b.tensor.to_bits());
            }
        }
    }
}

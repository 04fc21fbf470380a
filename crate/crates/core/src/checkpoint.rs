//! Binary weight files.
//!
//! Little-endian throughout: magic `PTCK`, version, tensor count, then per
//! tensor its name length, UTF-8 name, rank, dims and `f32` payload.
//! Values are stored at 32-bit precision, so a loaded store holds the
//! `f32`-rounded weights and saving it again reproduces the file exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PTCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes every tensor in store order.
pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, store.len())?;
    for (_, p) in store.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
        let raw = r.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(store)?)?;
    Ok(())
}

/// Overwrites `store` with the weights in `path`; names and shapes must match
/// exactly.
pub fn load(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let tensors = decode(&std::fs::read(path)?)?;
    store.load_values(&tensors)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "a.w",
            Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, 1e-8, 7.25, -0.0]).unwrap(),
            true,
        );
        s.add("b", Tensor::vector(vec![1.0]), false);
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&store()).unwrap();
        assert_eq!(&bytes[..4], b"PTCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..19], b"a.w");
        // rank 2, dims 2 and 3, six floats; then "b" with rank 1
        let first = 19 + 4 + 8 + 24;
        assert_eq!(bytes.len(), first + 4 + 1 + 4 + 4 + 4);
        assert_eq!(&bytes[first + 13..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("one.bin"), dir.path().join("two.bin"));
        let s = store();
        save(&s, &p1).unwrap();
        let mut loaded = store();
        loaded
            .value_mut(loaded.find("a.w").unwrap())
            .data_mut()
            .fill(0.0);
        load(&mut loaded, &p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.value(loaded.find("a.w").unwrap()).data()[1], -2.5);
    }

    #[test]
    fn rejects_malformed_files() {
        let good = encode(&store()).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());
        let mut version = good.clone();
        version[4] = 9;
        assert!(decode(&version).is_err());
    }

    #[test]
    fn load_rejects_mismatched_store() {
        let bytes = encode(&store()).unwrap();
        let tensors = decode(&bytes).unwrap();
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(&[3, 2]), true);
        other.add("b", Tensor::zeros(&[1]), false);
        assert!(other.load_values(&tensors).is_err());
        let mut fewer = ParamStore::new();
        fewer.add("b", Tensor::zeros(&[1]), false);
        assert!(fewer.load_values(&tensors).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_up_to_f32(vals in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let mut s = ParamStore::new();
            s.add("x", Tensor::vector(vals.clone()), true);
            let t = decode(&encode(&s).unwrap()).unwrap();
            for (a, b) in t[0].1.data().iter().zip(&vals) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}

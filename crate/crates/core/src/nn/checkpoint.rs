//! Named-tensor container file.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "CLBL"
//! version  u32      1
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (u64 × rank)
//!   data     f64 × product(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CLBL";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a container; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic bytes (expected \"CLBL\")"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let start = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| {
                let mut e = r.err("name is not UTF-8");
                if let Error::Parse { offset, .. } = &mut e {
                    *offset = start as u64;
                }
                e
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        if dims.contains(&0) {
            return Err(r.err(format!("tensor {name:?} has a zero dimension")));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| r.err(format!("tensor {name:?} dimensions {dims:?} exceed the file")))?;
        let raw = r.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes, path)?
        .into_iter()
        .map(|(n, t)| (n, Tensor::from_f64(&t)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.5f64, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), &t)]);
        assert_eq!(&bytes[..4], b"CLBL");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'w');
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(&bytes[21..29], &2u64.to_le_bytes());
        assert_eq!(&bytes[29..37], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 45);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("abc".to_string(), &t)]);
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut, Path::new("x.bin")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 31),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode(b"NOPE", Path::new("x")),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact(
            shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 0..4), 1..4),
            seed in any::<u64>(),
        ) {
            let tensors: Vec<(String, Tensor<f64>)> = shapes.iter().enumerate().map(|(i, s)| {
                let t = Tensor::from_fn(s.clone(), |j| f64::from_bits(seed.wrapping_mul(j as u64 + 1) >> 2));
                (format!("t{i}.é"), t)
            }).collect();
            let refs: Vec<(String, &Tensor<f64>)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
            let back = decode(&encode(&refs), Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in back.iter().zip(&tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}

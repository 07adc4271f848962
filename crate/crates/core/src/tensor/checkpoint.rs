//! Little-endian parameter files.
//!
//! Layout: the 5-byte magic `CRWD1`, then for each tensor until end of file:
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u32` extents and the raw
//! `f32` values.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CRWD1";

/// A named tensor as stored in a checkpoint.
pub type NamedTensor = (String, Tensor<f32>);

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "missing CRWD1 magic"));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
        path,
    };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&[("b".to_string(), t)]);
        let mut expect = b"CRWD1".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, b'b', 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let p = Path::new("x.ckpt");
        assert!(matches!(decode(b"CRWD2", p), Err(Error::Format { .. })));
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("w".into(), t)]);
        assert!(decode(&bytes[..bytes.len() - 2], p).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..4), 0..4),
                     seed in any::<u32>()) {
            let tensors: Vec<NamedTensor> = shapes.iter().enumerate().map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|j| (seed as f32) * 0.5 - j as f32).collect();
                (format!("t{i}"), Tensor::new(s.clone(), data).unwrap())
            }).collect();
            let back = decode(&encode(&tensors), Path::new("mem")).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }
}

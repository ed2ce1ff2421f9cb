//! Binary checkpoint of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "DPCK"
//! version  u32      1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents u32 × rank
//!   payload  f32 × product(extents)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(params: Vec<(String, &mut Tensor<T>)>) -> Self {
        Self {
            tensors: params.into_iter().map(|(n, t)| (n, t.cast())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into `params`; every parameter must be present
    /// with an identical shape.
    pub fn load_into<T: Scalar>(&self, params: Vec<(String, &mut Tensor<T>)>) -> Result<()> {
        if params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} tensors, checkpoint has {}",
                params.len(),
                self.tensors.len()
            )));
        }
        for (name, param) in params {
            let stored = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
            if stored.shape() != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: checkpoint shape {:?}, model expects {:?}",
                    stored.shape(),
                    param.shape()
                )));
            }
            for (dst, &src) in param.data_mut().iter_mut().zip(stored.data()) {
                *dst = T::of(f64::from(src));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad checkpoint magic, expected DPCK".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Parse {
                offset: at,
                message: "tensor name is not UTF-8".into(),
            })?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let payload = r.take(len.checked_mul(4).ok_or_else(|| r.err("tensor too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last tensor"));
        }
        Ok(Self { tensors })
    }

    /// Writes via a `.partial` sibling that is renamed on success.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn err(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a.weight".into(), Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap()),
                ("a.bias".into(), Tensor::from_vec(&[2], vec![0.25, 8.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"DPCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &8u32.to_le_bytes());
        assert_eq!(&bytes[16..24], b"a.weight");
        // total: 12 header + (4+8+4+8+16) + (4+6+4+4+8)
        assert_eq!(bytes.len(), 12 + 40 + 26);
    }

    #[test]
    fn roundtrip() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Parse { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn load_into_names_offending_tensor() {
        let ck = sample();
        let mut w = Tensor::<f64>::zeros(&[2, 3]);
        let mut b = Tensor::<f64>::zeros(&[2]);
        let err = ck
            .load_into(vec![("a.weight".into(), &mut w), ("a.bias".into(), &mut b)])
            .unwrap_err();
        assert!(err.to_string().contains("a.weight"), "{err}");
    }
}

//! Little-endian binary container for named tensors.
//!
//! Layout: `b"HFLW"`, version byte, `u32` entry count, then per entry a `u64`
//! byte length followed by `u32` name length, UTF-8 name, `u32` rank, `u64`
//! extents and `f64` values.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::Scalar;

pub const MAGIC: [u8; 4] = *b"HFLW";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params<S: Scalar>(ps: &ParamStore<S>) -> Self {
        let mut c = Self::new();
        for p in ps.iter() {
            c.insert(p.name.clone(), p.value.cast());
        }
        c
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f64>> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing entry {name:?}")))
    }

    pub fn entries(&self) -> &[(String, Tensor<f64>)] {
        &self.entries
    }

    pub fn load_params<S: Scalar>(&self, ps: &mut ParamStore<S>) -> Result<()> {
        ps.load_values(|name| self.get(name))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let mut e = Vec::new();
            e.extend_from_slice(&(name.len() as u32).to_le_bytes());
            e.extend_from_slice(name.as_bytes());
            e.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                e.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                e.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(e.len() as u64).to_le_bytes());
            out.extend_from_slice(&e);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u64()? as usize;
            let body = r.take(len)?;
            let mut e = Reader { buf: body, pos: 0 };
            let name_len = e.u32()? as usize;
            let name = std::str::from_utf8(e.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = e.u32()? as usize;
            let shape = (0..rank).map(|_| e.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| e.f64()).collect::<Result<Vec<_>>>()?;
            if e.pos != body.len() {
                return Err(Error::Format(format!("entry {name} has trailing bytes")));
            }
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.insert("a", Tensor::vector(vec![1.5]));
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"HFLW");
        assert_eq!(b[4], 1);
        assert_eq!(u32::from_le_bytes(b[5..9].try_into().unwrap()), 1);
        // entry: 4 + 1 + 4 + 8 (one extent) + 8 (one value)
        assert_eq!(u64::from_le_bytes(b[9..17].try_into().unwrap()), 25);
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::zeros(&[2, 2]));
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"XXXX").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(entries in proptest::collection::vec(
            ("[a-z.]{1,12}", proptest::collection::vec(-1e6f64..1e6, 0..20)), 0..6)) {
            let mut c = Checkpoint::new();
            for (name, data) in &entries {
                c.insert(name.clone(), Tensor::vector(data.clone()));
            }
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}

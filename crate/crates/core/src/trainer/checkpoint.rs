//! Binary checkpoint: magic `CRVL1`, a little-endian `u32` version, an
//! entry count, then per entry the name, shape, dtype code and raw values.
//!
//! | dtype code | values |
//! |-----------:|--------|
//! | 0 | `f32` |
//! | 1 | `f64` |
//! | 2 | `u64` |
//! | 3 | `u8`  |

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 5] = b"CRVL1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Values {
    fn code(&self) -> u8 {
        match self {
            Values::F32(_) => 0,
            Values::F64(_) => 1,
            Values::U64(_) => 2,
            Values::U8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
            Values::U64(v) => v.len(),
            Values::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub values: Values,
}

/// Ordered named entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: IndexMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Values) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Checkpoint(format!(
                "entry {name}: shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        self.entries.insert(
            name.to_string(),
            Entry {
                shape: shape.to_vec(),
                values,
            },
        );
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let flat = t.flatten_all()?;
        let values = match t.dtype() {
            DType::F32 => Values::F32(flat.to_vec1()?),
            DType::F64 => Values::F64(flat.to_vec1()?),
            other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
        };
        self.insert(name, t.dims(), values)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
        let t = match &e.values {
            Values::F32(v) => Tensor::from_slice(v, e.shape.as_slice(), &Device::Cpu)?,
            Values::F64(v) => Tensor::from_slice(v, e.shape.as_slice(), &Device::Cpu)?,
            _ => return Err(Error::Checkpoint(format!("entry {name} is not floating point"))),
        };
        Ok(t)
    }

    pub fn insert_u64(&mut self, name: &str, v: u64) -> Result<()> {
        self.insert(name, &[1], Values::U64(vec![v]))
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.get(name).map(|e| &e.values) {
            Some(Values::U64(v)) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Checkpoint(format!("missing u64 entry {name}"))),
        }
    }

    pub fn insert_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.insert(name, &[bytes.len()], Values::U8(bytes.to_vec()))
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name).map(|e| &e.values) {
            Some(Values::U8(v)) => Ok(v),
            _ => Err(Error::Checkpoint(format!("missing byte entry {name}"))),
        }
    }

    pub fn insert_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.insert_bytes(name, &serde_json::to_vec(value)?)
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_slice(self.bytes(name)?)?)
    }

    /// Adds every parameter of `store` under its own name.
    pub fn insert_store(&mut self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            self.insert_tensor(name, var.as_tensor())?;
        }
        Ok(())
    }

    /// Floating-point entries whose names start with `prefix`, loaded into
    /// `store` at the store's dtype.
    pub fn load_into(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, e) in &self.entries {
            if name.starts_with(prefix) && matches!(e.values, Values::F32(_) | Values::F64(_)) {
                store.insert(name, &self.tensor(name)?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(e.values.code());
            match &e.values {
                Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let ndims = r.u32()? as usize;
            let shape = (0..ndims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = match r.take(1)?[0] {
                0 => Values::F32(r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => Values::F64(r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => Values::U64(r.take(n * 8)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                3 => Values::U8(r.take(n)?.to_vec()),
                code => return Err(Error::Checkpoint(format!("entry {name}: unknown dtype code {code}"))),
            };
            if ckpt.entries.contains_key(&name) {
                return Err(Error::Checkpoint(format!("duplicate entry {name}")));
            }
            ckpt.entries.insert(name, Entry { shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w", &[2, 2], Values::F32(vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE])).unwrap();
        c.insert("d", &[], Values::F64(vec![std::f64::consts::PI])).unwrap();
        c.insert_u64("step", 17).unwrap();
        c.insert_bytes("meta", b"{}").unwrap();
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..5], b"CRVL1");
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn shape_must_match() {
        let mut c = Checkpoint::new();
        assert!(c.insert("x", &[3], Values::F32(vec![1.0])).is_err());
    }

    proptest! {
        #[test]
        fn bytes_are_stable(vals in proptest::collection::vec(any::<f64>(), 0..40), n in 0u64..1000) {
            let mut c = Checkpoint::new();
            c.insert("v", &[vals.len()], Values::F64(vals.clone())).unwrap();
            c.insert_u64("n", n).unwrap();
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}

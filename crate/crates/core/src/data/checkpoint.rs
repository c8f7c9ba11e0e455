//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DAMIM01"            7 bytes magic
//! version              u16 (= 1)
//! array count          u32
//! per array:
//!   name length        u16, then UTF-8 name
//!   dtype              u8 (0 = f32, 1 = f64)
//!   rank               u8, then rank × u32 dims
//!   data               product(dims) values
//! crc32                u32 over every preceding byte
//! ```

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 7] = b"DAMIM01";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

fn to_data<T: Real>(t: &Tensor<T>) -> ArrayData {
    if T::DTYPE == 0 {
        ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect())
    } else {
        ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<()> {
        let name = name.into();
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(Error::Contract(format!("duplicate array name `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("array `{name}` shape {shape:?} holds {} values", data.len())));
        }
        self.arrays.push(NamedArray { name, shape, data });
        Ok(())
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.push(name, t.shape().to_vec(), to_data(t))
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let a = self
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no array `{name}`")))?;
        let data = match &a.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::of_f32(x)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        };
        Tensor::from_vec(&a.shape, data)
    }

    /// Every parameter of `store`, under its own name.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        let mut ck = Self::new();
        for (_, p) in store.iter() {
            ck.push_tensor(p.name.clone(), &p.value)?;
        }
        Ok(ck)
    }

    /// Parameters back into a fresh store, skipping arrays whose names start
    /// with `meta.`.
    pub fn to_store<T: Real>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for a in self.arrays.iter().filter(|a| !a.name.starts_with("meta.")) {
            store.add(a.name.clone(), self.tensor(&a.name)?)?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names = BTreeSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.arrays.len()).map_err(|_| Error::Contract("too many arrays".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for a in &self.arrays {
            if !names.insert(a.name.as_str()) {
                return Err(Error::Contract(format!("duplicate array name `{}`", a.name)));
            }
            let name_len =
                u16::try_from(a.name.len()).map_err(|_| Error::Contract(format!("name `{}` too long", a.name)))?;
            let rank = u8::try_from(a.shape.len()).map_err(|_| Error::Contract("rank above 255".into()))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.dtype());
            out.push(rank);
            for &d in &a.shape {
                let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dim {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(Error::Corrupt(format!("{} bytes is shorter than any checkpoint", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Corrupt(format!("crc mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut c = Cursor {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = c.u16()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {version}")));
        }
        let count = c.u32()? as usize;
        let mut ck = Self::new();
        for _ in 0..count {
            let len = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(len)?)
                .map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?
                .to_string();
            let dtype = c.u8()?;
            let rank = c.u8()? as usize;
            let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => ArrayData::F32(
                    c.take(n * 4)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => ArrayData::F64(
                    c.take(n * 8)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(Error::Corrupt(format!("unknown dtype code {other}"))),
            };
            ck.push(name, shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        if c.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - c.pos)));
        }
        Ok(ck)
    }

    /// Small `usize` records stored as an f64 array.
    pub fn push_meta(&mut self, key: &str, values: &[f64]) -> Result<()> {
        self.push(format!("meta.{key}"), vec![values.len()], ArrayData::F64(values.to_vec()))
    }

    pub fn meta(&self, key: &str) -> Option<Vec<f64>> {
        self.get(&format!("meta.{key}")).map(|a| match &a.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        })
    }
}

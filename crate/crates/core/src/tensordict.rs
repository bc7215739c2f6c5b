//! A tiny named-tensor container used by all checkpoint files.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic: 4 bytes            caller-chosen, identifies the file kind
//! version: u32
//! count: u32                number of entries
//! entry*:
//!   name_len: u16, name: utf-8 bytes
//!   dtype: u8               0 = f32, 1 = u8, 2 = u32, 3 = f64, 4 = u64
//!   ndim: u8, dims: u32 * ndim
//!   payload: raw values, row-major
//! ```
//!
//! Entries are written in insertion order and round-trip bit-exactly.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    F32(Vec<u32>, Vec<f32>),
    U8(Vec<u32>, Vec<u8>),
    U32(Vec<u32>, Vec<u32>),
    F64(Vec<u32>, Vec<f64>),
    U64(Vec<u32>, Vec<u64>),
}

impl Value {
    fn dtype(&self) -> u8 {
        match self {
            Value::F32(..) => 0,
            Value::U8(..) => 1,
            Value::U32(..) => 2,
            Value::F64(..) => 3,
            Value::U64(..) => 4,
        }
    }

    fn dims(&self) -> &[u32] {
        match self {
            Value::F32(d, _)
            | Value::U8(d, _)
            | Value::U32(d, _)
            | Value::F64(d, _)
            | Value::U64(d, _) => d,
        }
    }

    fn len(&self) -> usize {
        match self {
            Value::F32(_, v) => v.len(),
            Value::U8(_, v) => v.len(),
            Value::U32(_, v) => v.len(),
            Value::F64(_, v) => v.len(),
            Value::U64(_, v) => v.len(),
        }
    }
}

/// An ordered map of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorDict {
    entries: Vec<(String, Value)>,
    index: BTreeMap<String, usize>,
}

impl TensorDict {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Value) {
        let name = name.into();
        debug_assert_eq!(
            value.dims().iter().map(|&d| d as usize).product::<usize>(),
            value.len(),
            "dims/payload mismatch for {name}"
        );
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, value));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    // Typed convenience accessors; the caller states the expected dtype.

    pub fn insert_f32s(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) {
        self.insert(name, Value::F32(dims.iter().map(|&d| d as u32).collect(), data));
    }

    pub fn insert_scalar_u64(&mut self, name: impl Into<String>, v: u64) {
        self.insert(name, Value::U64(vec![1], vec![v]));
    }

    pub fn insert_str(&mut self, name: impl Into<String>, s: &str) {
        self.insert(
            name,
            Value::U8(vec![s.len() as u32], s.as_bytes().to_vec()),
        );
    }

    pub fn f32s(&self, name: &str) -> Result<(&[u32], &[f32])> {
        match self.get(name) {
            Some(Value::F32(d, v)) => Ok((d, v)),
            Some(_) => Err(Error::validation(format!("entry {name} has wrong dtype"))),
            None => Err(Error::validation(format!("missing entry {name}"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[u32], &[u8])> {
        match self.get(name) {
            Some(Value::U8(d, v)) => Ok((d, v)),
            Some(_) => Err(Error::validation(format!("entry {name} has wrong dtype"))),
            None => Err(Error::validation(format!("missing entry {name}"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<(&[u32], &[u32])> {
        match self.get(name) {
            Some(Value::U32(d, v)) => Ok((d, v)),
            Some(_) => Err(Error::validation(format!("entry {name} has wrong dtype"))),
            None => Err(Error::validation(format!("missing entry {name}"))),
        }
    }

    pub fn scalar_u64(&self, name: &str) -> Result<u64> {
        match self.get(name) {
            Some(Value::U64(_, v)) if v.len() == 1 => Ok(v[0]),
            Some(_) => Err(Error::validation(format!("entry {name} is not a scalar"))),
            None => Err(Error::validation(format!("missing entry {name}"))),
        }
    }

    pub fn string(&self, name: &str) -> Result<String> {
        let (_, bytes) = self.u8s(name)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::validation(format!("entry {name} is not utf-8")))
    }

    pub fn write_to(&self, w: &mut impl Write, magic: &[u8; 4], version: u32) -> std::io::Result<()> {
        w.write_all(magic)?;
        w.write_u32::<LittleEndian>(version)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, value) in &self.entries {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(value.dtype())?;
            let dims = value.dims();
            w.write_u8(dims.len() as u8)?;
            for &d in dims {
                w.write_u32::<LittleEndian>(d)?;
            }
            match value {
                Value::F32(_, v) => {
                    for &x in v {
                        w.write_f32::<LittleEndian>(x)?;
                    }
                }
                Value::U8(_, v) => w.write_all(v)?,
                Value::U32(_, v) => {
                    for &x in v {
                        w.write_u32::<LittleEndian>(x)?;
                    }
                }
                Value::F64(_, v) => {
                    for &x in v {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
                Value::U64(_, v) => {
                    for &x in v {
                        w.write_u64::<LittleEndian>(x)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, magic: &[u8; 4], path: &Path) -> Result<(Self, u32)> {
        let err = |msg: &str| Error::format(path, msg);
        let mut got_magic = [0u8; 4];
        r.read_exact(&mut got_magic)
            .map_err(|e| Error::io(path, e))?;
        if &got_magic != magic {
            return Err(err("bad magic"));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        let count = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        let mut dict = TensorDict::new();
        for _ in 0..count {
            let name_len = r
                .read_u16::<LittleEndian>()
                .map_err(|e| Error::io(path, e))? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|e| Error::io(path, e))?;
            let name =
                String::from_utf8(name_bytes).map_err(|_| err("entry name is not utf-8"))?;
            let dtype = r.read_u8().map_err(|e| Error::io(path, e))?;
            let ndim = r.read_u8().map_err(|e| Error::io(path, e))? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(
                    r.read_u32::<LittleEndian>()
                        .map_err(|e| Error::io(path, e))?,
                );
            }
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let value = match dtype {
                0 => {
                    let mut v = vec![0f32; n];
                    r.read_f32_into::<LittleEndian>(&mut v)
                        .map_err(|e| Error::io(path, e))?;
                    Value::F32(dims, v)
                }
                1 => {
                    let mut v = vec![0u8; n];
                    r.read_exact(&mut v).map_err(|e| Error::io(path, e))?;
                    Value::U8(dims, v)
                }
                2 => {
                    let mut v = vec![0u32; n];
                    r.read_u32_into::<LittleEndian>(&mut v)
                        .map_err(|e| Error::io(path, e))?;
                    Value::U32(dims, v)
                }
                3 => {
                    let mut v = vec![0f64; n];
                    r.read_f64_into::<LittleEndian>(&mut v)
                        .map_err(|e| Error::io(path, e))?;
                    Value::F64(dims, v)
                }
                4 => {
                    let mut v = vec![0u64; n];
                    r.read_u64_into::<LittleEndian>(&mut v)
                        .map_err(|e| Error::io(path, e))?;
                    Value::U64(dims, v)
                }
                other => return Err(err(&format!("unknown dtype {other}"))),
            };
            dict.insert(name, value);
        }
        Ok((dict, version))
    }

    pub fn save(&self, path: &Path, magic: &[u8; 4], version: u32) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w, magic, version)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: &[u8; 4]) -> Result<(Self, u32)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        Self::read_from(&mut r, magic, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut d = TensorDict::new();
        d.insert_f32s("a.w", &[2, 3], vec![0.5, -1.25, 3.5e-9, f32::MIN_POSITIVE, 1.0, 2.0]);
        d.insert("b", Value::U8(vec![4], vec![1, 2, 3, 255]));
        d.insert_scalar_u64("epoch", 42);
        d.insert_str("digest", "abc123");

        let mut buf = Vec::new();
        d.write_to(&mut buf, b"TEST", 1).unwrap();
        let (back, version) =
            TensorDict::read_from(&mut &buf[..], b"TEST", Path::new("mem")).unwrap();
        assert_eq!(version, 1);
        assert_eq!(back, d);

        let mut buf2 = Vec::new();
        back.write_to(&mut buf2, b"TEST", 1).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut buf = Vec::new();
        TensorDict::new().write_to(&mut buf, b"AAAA", 1).unwrap();
        let err = TensorDict::read_from(&mut &buf[..], b"BBBB", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}

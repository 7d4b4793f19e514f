//! Named-tensor archive used for checkpoints.
//!
//! Layout: `"MCAN"`, u16 version, u32 entry count, then per entry a u16 name
//! length, the UTF-8 name, a u8 dtype code (0 = f32, 1 = f64), a u8 rank,
//! `rank` u32 dims and the little-endian payload. A CRC32 of everything after
//! the header closes the file. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MCAN";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Entry {
    fn dims(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.dims(),
            Entry::F64(t) => t.dims(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), Entry::F32(t)));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.entries.push((name.into(), Entry::F64(t)));
    }

    /// Store a u64 exactly as four 16-bit limbs in an f64 tensor.
    pub fn push_counter(&mut self, name: impl Into<String>, value: u64) {
        let limbs = (0..4).map(|i| ((value >> (16 * i)) & 0xffff) as f64).collect();
        self.push_f64(name, Tensor::from_parts(vec![4], limbs));
    }

    /// Store UTF-8 text as one f32 per byte.
    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        self.push_f32(name, Tensor::from_parts(vec![bytes.len()], bytes));
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::data(format!("checkpoint has no entry {name:?}")))
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name)? {
            Entry::F32(t) => Ok(t),
            Entry::F64(_) => Err(Error::data(format!("entry {name:?} is f64, expected f32"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&Tensor<f64>> {
        match self.get(name)? {
            Entry::F64(t) => Ok(t),
            Entry::F32(_) => Err(Error::data(format!("entry {name:?} is f32, expected f64"))),
        }
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        let t = self.f64(name)?;
        if t.dims() != [4] || t.data().iter().any(|&v| !(0.0..65536.0).contains(&v) || v.fract() != 0.0) {
            return Err(Error::data(format!("entry {name:?} is not a counter")));
        }
        Ok(t.data()
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i))))
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let bytes = self
            .f32(name)?
            .data()
            .iter()
            .map(|&v| {
                (v.fract() == 0.0 && (0.0..256.0).contains(&v))
                    .then_some(v as u8)
                    .ok_or_else(|| Error::data(format!("entry {name:?} is not text")))
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|_| Error::data(format!("entry {name:?} is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dtype = match entry {
                Entry::F32(_) => f32::DTYPE,
                Entry::F64(_) => f64::DTYPE,
            };
            out.push(dtype);
            out.push(entry.dims().len() as u8);
            for &d in entry.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match entry {
                Entry::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, not a checkpoint archive"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::format(bytes.len(), "truncated archive: missing checksum"));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: HEADER_LEN,
        };
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(name_at + 2, "entry name is not UTF-8"))?
                .to_string();
            let dtype_at = r.pos;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::format(dtype_at + 1, format!("rank {rank} outside 1..=4")));
            }
            let dims_at = r.pos;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let elems = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(dims_at, "dims overflow"))?;
            let entry = match dtype {
                0 => Entry::F32(r.tensor::<f32>(&dims, elems, dims_at)?),
                1 => Entry::F64(r.tensor::<f64>(&dims, elems, dims_at)?),
                other => return Err(Error::format(dtype_at, format!("unknown dtype code {other}"))),
            };
            entries.push((name, entry));
        }
        if r.pos != body_end {
            return Err(Error::format(r.pos, "trailing bytes after last entry"));
        }
        let actual = crc32fast::hash(&bytes[HEADER_LEN..body_end]);
        if actual != stored {
            return Err(Error::format(
                body_end,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
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
            .ok_or_else(|| {
                Error::format(self.pos, format!("truncated archive: need {n} more bytes"))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
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

    fn tensor<T: Scalar>(&mut self, dims: &[usize], elems: usize, dims_at: usize) -> Result<Tensor<T>> {
        let width = std::mem::size_of::<T>();
        let len = elems
            .checked_mul(width)
            .ok_or_else(|| Error::format(dims_at, "dims overflow"))?;
        if len > self.bytes.len() - self.pos {
            return Err(Error::format(
                dims_at,
                format!("dims {dims:?} need {len} payload bytes, only {} remain", self.bytes.len() - self.pos),
            ));
        }
        let data = self.take(len)?.chunks_exact(width).map(T::read_le).collect();
        Ok(Tensor::from_parts(dims.to_vec(), data))
    }
}

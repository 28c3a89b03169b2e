//! The `NSTW1` tensor container used for weights, cached statistics and
//! exact optimizer checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NSTW1"                      5-byte magic
//! u32 record_count
//! record_count x {
//!     u32 name_len, name (UTF-8)
//!     u8  dtype tag (0 = f32, 1 = f64)
//!     u32 rank, rank x u32 dims
//!     prod(dims) raw little-endian floats
//! }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 5] = b"NSTW1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64; narrowed to `dtype` on write.
    pub data: Vec<f64>,
}

impl Record {
    pub fn new(name: impl Into<String>, dtype: DType, shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Record {
            name: name.into(),
            dtype,
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Record::new(name, T::DTYPE, t.shape(), t.data().iter().map(|v| v.to_f64()).collect())
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| T::from_f64(v)).collect())
            .expect("record shape matches its data")
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dtype.tag());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &r.data {
            match r.dtype {
                DType::F32 => (v as f32).write_le(&mut out),
                DType::F64 => v.write_le(&mut out),
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated container while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("bad magic (expected NSTW1)".into()));
    }
    let count = cur.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let tag = cur.take(1, "dtype")?[0];
        let dtype =
            DType::from_tag(tag).ok_or_else(|| Error::Format(format!("record {name}: unknown dtype tag {tag}")))?;
        let rank = cur.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("record {name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * dtype.size(), &format!("data of {name}"))?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        records.push(Record {
            name,
            dtype,
            shape,
            data,
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            buf.len() - cur.pos
        )));
    }
    Ok(records)
}

pub fn write(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(records))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|source| Error::Open {
        what: "container",
        path: path.to_path_buf(),
        source,
    })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    decode(&buf)
}

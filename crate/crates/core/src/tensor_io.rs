//! Portable tensor format.
//!
//! Layout of one record, all integers and floats little-endian:
//!
//! ```text
//! b"MPTENS01"  u32 rank  u32 dims[rank]  f64 payload[prod(dims)]
//! ```
//!
//! A file may hold several records back to back; readers consume records
//! until end of file. The trailing `01` of the magic is the format version.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MPTENS01";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch { expected: n, actual: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { dims: vec![data.len()], data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { dims: vec![], data: vec![v] }
    }

    /// Stacks equal-length rows into a rank-2 tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::DimensionMismatch { expected: width, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dims: vec![rows.len(), width], data })
    }

    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        if self.dims.len() != 2 {
            return Err(Error::Format(format!("expected rank 2, got rank {}", self.dims.len())));
        }
        let w = self.dims[1];
        if w == 0 {
            return Ok(vec![Vec::new(); self.dims[0]]);
        }
        Ok(self.data.chunks(w).map(<[f64]>::to_vec).collect())
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    let rank = u32::try_from(t.dims.len()).map_err(|_| Error::Format("rank overflow".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record; `Ok(None)` at a clean end of file.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 8];
    let mut got = 0;
    while got < magic.len() {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Format("truncated magic".into())),
            Ok(k) => got += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated payload".into()))?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Some(Tensor { dims, data }))
}

pub fn save(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tensors {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

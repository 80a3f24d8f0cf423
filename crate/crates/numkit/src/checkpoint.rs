//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "NUMKITCK"
//! version  u32 LE    currently 1
//! step     u64 LE
//! count    u32 LE
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, data f64 LE × numel }
//! ```
//! Parameters appear in lexicographic name order, so encoding is canonical.

use std::path::Path;

use crate::error::{NumError, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NUMKITCK";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.step().to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NumError::Format(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
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

pub fn decode(bytes: &[u8]) -> Result<ParameterSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NumError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NumError::Format(format!("unsupported version {version}")));
    }
    let step = r.u64()?;
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| NumError::Format(format!("parameter name: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(NumError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    params.set_step(step);
    Ok(params)
}

pub fn save(params: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterSet> {
    decode(&std::fs::read(path)?)
}

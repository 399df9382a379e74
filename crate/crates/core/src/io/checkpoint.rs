//! Named-tensor container: magic `G4DS`, version, tensors, trailing CRC32.
//!
//! Layout (little-endian):
//!
//! ```text
//! "G4DS" | u32 version = 1 | u64 count
//! per tensor: u16 name_len | name (UTF-8) | u8 dtype (0 = f32, 1 = f64)
//!             | u8 rank | u64 dims[rank] | data
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use crate::io::IoError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"G4DS";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One stored tensor. `F32` entries are widened to `f64` on load.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

impl Entry {
    pub fn f64(name: impl Into<String>, tensor: Tensor) -> Self {
        Self { name: name.into(), dtype: Dtype::F64, tensor }
    }

    /// Raw bytes stored one per `f32` element (exact for 0..=255).
    pub fn bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        let t = Tensor::new([bytes.len()], bytes.iter().map(|&b| b as f64).collect());
        Self { name: name.into(), dtype: Dtype::F32, tensor: t }
    }

    /// Inverse of [`Entry::bytes`].
    pub fn as_bytes(&self) -> Option<Vec<u8>> {
        self.tensor
            .data()
            .iter()
            .map(|&v| (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8))
            .collect()
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>, IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len =
            u16::try_from(name.len()).map_err(|_| IoError::Invalid(format!("tensor name too long: {}", e.name)))?;
        let rank =
            u8::try_from(e.tensor.shape().len()).map_err(|_| IoError::Invalid(format!("rank too high: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.dtype.tag());
        out.push(rank);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match e.dtype {
            Dtype::F32 => e.tensor.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            Dtype::F64 => e.tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| IoError::Truncated {
            offset: self.pos,
            what: what.to_string(),
            expected: n,
            actual: self.buf.len().saturating_sub(self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, IoError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>, IoError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(IoError::Magic { expected: "G4DS", found: magic.to_vec() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(IoError::Version { found: version, supported: VERSION });
    }
    let body = buf.len().saturating_sub(4).max(8);
    let stored = buf.get(body..).filter(|t| t.len() == 4).map(|t| u32::from_le_bytes(t.try_into().unwrap()));
    let computed = crc32fast::hash(&buf[..body]);
    if stored != Some(computed) {
        // A short file usually fails the CRC first; report the size mismatch
        // when the layout itself runs past the end.
        return Err(match parse_tensors(buf, 8) {
            Err(e @ IoError::Truncated { .. }) => e,
            Ok(end) if end == buf.len() => {
                IoError::Truncated { offset: end, what: "CRC".into(), expected: 4, actual: 0 }
            }
            _ => IoError::Crc { offset: body, stored: stored.unwrap_or(0), computed },
        });
    }
    let mut out = Vec::new();
    let end = parse_into(&buf[..body], 8, &mut out)?;
    if end != body {
        return Err(IoError::Format { offset: end, msg: format!("{} trailing bytes before CRC", body - end) });
    }
    Ok(out)
}

fn parse_tensors(buf: &[u8], pos: usize) -> Result<usize, IoError> {
    parse_into(buf, pos, &mut Vec::new())
}

/// Parses the count and tensors starting at `pos`; returns the end offset.
fn parse_into(buf: &[u8], pos: usize, out: &mut Vec<Entry>) -> Result<usize, IoError> {
    let mut r = Reader { buf, pos };
    let count = r.u64("tensor count")?;
    for k in 0..count {
        let at = r.pos;
        let len = r.u16(&format!("name length of tensor {k}"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("name of tensor {k}"))?)
            .map_err(|_| IoError::Format { offset: at + 2, msg: format!("tensor {k} name is not UTF-8") })?
            .to_string();
        let tag_at = r.pos;
        let dtype = match r.u8(&format!("dtype of `{name}`"))? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            t => return Err(IoError::Format { offset: tag_at, msg: format!("unknown dtype tag {t} for `{name}`") }),
        };
        let rank = r.u8(&format!("rank of `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64(&format!("dims of `{name}`"))?;
            shape.push(
                usize::try_from(d).map_err(|_| IoError::Format { offset: r.pos - 8, msg: "dim overflow".into() })?,
            );
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = n
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| IoError::Format { offset: r.pos, msg: format!("tensor `{name}` size overflows") })?;
        let raw = r.take(bytes, &format!("data of `{name}`"))?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        out.push(Entry { name, dtype, tensor: Tensor::new(shape, data) });
    }
    Ok(r.pos)
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<(), IoError> {
    crate::io::write_file(path, &encode(entries)?)
}

pub fn load(path: &Path) -> Result<Vec<Entry>, IoError> {
    decode(&crate::io::read_file(path)?)
}

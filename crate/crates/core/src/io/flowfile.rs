//! Flow field files.
//!
//! ```text
//! "G4DF" | u32 version = 1 | u32 width | u32 height
//! per pixel, row-major: f32 dx | f32 dy | u8 mask (1 = valid)
//! ```
//!
//! All integers and floats little-endian.

use std::path::Path;

use crate::io::IoError;
use crate::metrics::flow::FlowField;

pub const MAGIC: &[u8; 4] = b"G4DF";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;
const PIXEL: usize = 9;

pub fn encode(flow: &FlowField) -> Result<Vec<u8>, IoError> {
    let dims = |v: usize| u32::try_from(v).map_err(|_| IoError::Invalid(format!("flow dimension {v} too large")));
    let mut out = Vec::with_capacity(HEADER + PIXEL * flow.valid.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dims(flow.width)?.to_le_bytes());
    out.extend_from_slice(&dims(flow.height)?.to_le_bytes());
    for i in 0..flow.valid.len() {
        out.extend_from_slice(&flow.dx[i].to_le_bytes());
        out.extend_from_slice(&flow.dy[i].to_le_bytes());
        out.push(u8::from(flow.valid[i]));
    }
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<FlowField, IoError> {
    if buf.len() < HEADER {
        return Err(IoError::Truncated { offset: 0, what: "flow header".into(), expected: HEADER, actual: buf.len() });
    }
    if &buf[..4] != MAGIC {
        return Err(IoError::Magic { expected: "G4DF", found: buf[..4].to_vec() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(IoError::Version { found: version, supported: VERSION });
    }
    let (w, h) = (u32_at(8) as usize, u32_at(12) as usize);
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(PIXEL))
        .ok_or_else(|| IoError::Format { offset: 8, msg: format!("flow size {w}x{h} overflows") })?;
    let body = &buf[HEADER..];
    if body.len() != need {
        return Err(IoError::Truncated {
            offset: HEADER,
            what: format!("{w}x{h} flow pixels"),
            expected: need,
            actual: body.len(),
        });
    }
    let mut flow = FlowField::invalid(w, h);
    for (i, px) in body.chunks_exact(PIXEL).enumerate() {
        flow.dx[i] = f32::from_le_bytes(px[0..4].try_into().unwrap());
        flow.dy[i] = f32::from_le_bytes(px[4..8].try_into().unwrap());
        flow.valid[i] = match px[8] {
            0 => false,
            1 => true,
            m => return Err(IoError::Format { offset: HEADER + i * PIXEL + 8, msg: format!("mask byte {m}") }),
        };
    }
    Ok(flow)
}

pub fn write(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    crate::io::write_file(path, &encode(flow)?)
}

pub fn read(path: &Path) -> Result<FlowField, IoError> {
    decode(&crate::io::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let mut f = FlowField::invalid(3, 2);
        f.set(1, 0, [0.25, -1.5]);
        f.set(2, 1, [f64::from(f32::MAX), 1e-30]);
        let b = encode(&f).unwrap();
        assert_eq!(b.len(), 16 + 6 * 9);
        assert_eq!(&b[..4], b"G4DF");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[25..29].try_into().unwrap()), 0.25);
        assert_eq!(b[33], 1);
        assert_eq!(decode(&b).unwrap(), f);
    }

    #[test]
    fn truncated_and_wrong_magic() {
        let b = encode(&FlowField::zero(4, 4)).unwrap();
        let err = decode(&b[..b.len() - 1]).unwrap_err();
        assert!(matches!(err, IoError::Truncated { expected: 144, actual: 143, .. }), "{err:?}");
        let mut m = b.clone();
        m[3] = b'X';
        assert!(matches!(decode(&m), Err(IoError::Magic { .. })));
    }
}

//! Netpbm color images. Writes binary P6 with maxval 255; reads P3 and P6
//! with any maxval, rescaling to `[0, 1]`.

use std::path::Path;

use crate::io::IoError;
use crate::tensor::Tensor;

/// 8-bit level of an intensity in `[0, 1]` (clamped).
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 bytes of an `[H, W, 3]` image.
pub fn encode(image: &Tensor) -> Result<Vec<u8>, IoError> {
    let &[h, w, 3] = image.shape() else {
        return Err(IoError::Invalid(format!("expected an [H, W, 3] image, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    binary: bool,
}

/// Reads whitespace-separated tokens, skipping `#` comments.
struct Tokens<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn next(&mut self, what: &str) -> Result<(usize, &str), IoError> {
        loop {
            match self.buf.get(self.pos) {
                Some(b'#') => {
                    while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => {
                    return Err(IoError::Truncated { offset: self.pos, what: what.into(), expected: 1, actual: 0 });
                }
            }
        }
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(|c| !c.is_ascii_whitespace() && *c != b'#') {
            self.pos += 1;
        }
        let tok = std::str::from_utf8(&self.buf[start..self.pos])
            .map_err(|_| IoError::Format { offset: start, msg: format!("{what} is not ASCII") })?;
        Ok((start, tok))
    }

    fn number(&mut self, what: &str) -> Result<u32, IoError> {
        let (at, tok) = self.next(what)?;
        tok.parse().map_err(|_| IoError::Format { offset: at, msg: format!("{what}: `{tok}` is not a number") })
    }
}

fn header(t: &mut Tokens) -> Result<Header, IoError> {
    let (_, magic) = t.next("magic")?;
    let binary = match magic {
        "P6" => true,
        "P3" => false,
        m => return Err(IoError::Magic { expected: "P6 or P3", found: m.as_bytes().to_vec() }),
    };
    let width = t.number("width")? as usize;
    let height = t.number("height")? as usize;
    let at = t.pos;
    let maxval = t.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(IoError::Format { offset: 0, msg: format!("empty image {width}x{height}") });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(IoError::Format { offset: at, msg: format!("maxval {maxval} outside 1..=65535") });
    }
    Ok(Header { width, height, maxval, binary })
}

/// Decodes a P3/P6 image to `[H, W, 3]` values in `[0, 1]`.
pub fn decode(buf: &[u8]) -> Result<Tensor, IoError> {
    let mut t = Tokens { buf, pos: 0 };
    let h = header(&mut t)?;
    let n = h.width * h.height * 3;
    let mut levels = Vec::with_capacity(n);
    if h.binary {
        // Exactly one whitespace byte separates maxval from the raster.
        let start = t.pos + 1;
        let width = if h.maxval > 255 { 2 } else { 1 };
        let need = n * width;
        let avail = buf.len().saturating_sub(start);
        if avail < need {
            return Err(IoError::Truncated { offset: start, what: "P6 raster".into(), expected: need, actual: avail });
        }
        let raster = &buf[start..start + need];
        if width == 1 {
            levels.extend(raster.iter().map(|&b| b as u32));
        } else {
            levels.extend(raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32));
        }
    } else {
        for _ in 0..n {
            levels.push(t.number("P3 sample")?);
        }
    }
    if let Some(i) = levels.iter().position(|&v| v > h.maxval) {
        return Err(IoError::Format {
            offset: 0,
            msg: format!("sample {i} = {} exceeds maxval {}", levels[i], h.maxval),
        });
    }
    if h.maxval != 255 {
        log::warn!("PPM maxval {} rescaled to [0, 1]", h.maxval);
    }
    let m = h.maxval as f64;
    Ok(Tensor::new([h.height, h.width, 3], levels.into_iter().map(|v| v as f64 / m).collect()))
}

pub fn write(path: &Path, image: &Tensor) -> Result<(), IoError> {
    crate::io::write_file(path, &encode(image)?)
}

pub fn read(path: &Path) -> Result<Tensor, IoError> {
    decode(&crate::io::read_file(path)?)
}

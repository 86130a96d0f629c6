//! Binary PPM (P6) reading and writing. Pixels map to `[3, h, w]` tensors
//! with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encode an RGB image tensor as P6 bytes, rounding to 8 bits.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("ppm encode (expected [3, h, w])", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + i];
            if !v.is_finite() {
                return Err(Error::NonFinite("image pixel".into()));
            }
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PPM", "truncated header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::format("PPM", format!("bad {what} '{tok}'")))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::format("PPM", format!("expected magic P6, found '{magic}'")));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let max = header_number(bytes, &mut pos, "maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::format("PPM", format!("empty image {w}x{h}")));
    }
    if max == 0 || max > 255 {
        return Err(Error::format("PPM", format!("unsupported maxval {max}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| {
        Error::format("PPM", format!("raster shorter than {} bytes", 3 * w * h))
    })?;
    let mut data = vec![0.0; 3 * h * w];
    let max = max as f64;
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / max;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

//! Image and tensor ingestion, output sinks.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rfk_core::{Error, Result, Shape, Tensor};

/// Decodes a binary PPM (P6) into a `(1, 3, H, W)` tensor scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::Malformed(format!("PPM: {msg}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || max == 0 || max > 255 {
        return Err(bad("dimensions must be positive and maxval in 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    if raster.len() < 3 * w * h {
        return Err(Error::Truncated(format!("PPM raster has {} of {} bytes", raster.len(), 3 * w * h)));
    }
    let plane = w * h;
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |i| {
        let (c, p) = (i / plane, i % plane);
        raster[3 * p + c] as f32 / max as f32
    }))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path)?)
}

/// Headerless little-endian f32 values of the given shape.
pub fn read_raw(path: &Path, shape: Shape) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != 4 * shape.numel() {
        return Err(Error::InvalidArgument {
            op: "forward",
            msg: format!("raw input has {} bytes, shape {shape} needs {}", bytes.len(), 4 * shape.numel()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

/// Writes `bytes` to `path`, or to stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout() {
        let mut bytes = b"P6\n# c\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51, 0, 102, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.4, 0.2, 1.0]);
    }

    #[test]
    fn ppm_errors() {
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n").is_err());
    }
}

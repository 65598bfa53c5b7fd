//! Binary weight files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      b"RFKW"
//! version    u16
//! body_len   u64            byte length of the body
//! body:
//!   header_len u32, header  UTF-8 `key=value` config lines
//!   count      u32
//!   count × { name_len u16, name, dtype u8 (1 = f32, 2 = f64), dims 4 × u32, payload }
//! crc32      u32            over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{Model, VariantConfig};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RFKW";
pub const WEIGHTS_VERSION: u16 = 1;

const PREAMBLE: usize = 4 + 2 + 8;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

pub fn encode_weights(model: &Model) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let header = model.config().to_kv_string();
    body.extend_from_slice(&u32::try_from(header.len()).map_err(|_| Error::Config("header too long".into()))?.to_le_bytes());
    body.extend_from_slice(header.as_bytes());
    body.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
        body.extend_from_slice(&len.to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(DTYPE_F32);
        for d in t.shape().dims() {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension too large in {name}")))?;
            body.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(PREAMBLE + body.len() + 4);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(model)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Malformed(format!("body ends inside {what}"))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(Error::Truncated("file ends inside the version field".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WEIGHTS_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated("file ends inside the length field".into()));
    }
    let body_len = u64::from_le_bytes(bytes[6..PREAMBLE].try_into().expect("8 bytes"));
    let expected = (PREAMBLE as u64).saturating_add(body_len).saturating_add(4);
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated(format!("{} bytes, expected {expected}", bytes.len())));
    }
    if bytes.len() as u64 > expected {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() as u64 - expected)));
    }
    let split = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[split..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..split]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader {
        buf: &bytes[PREAMBLE..split],
        pos: 0,
    };
    let header_len = u32::from_le_bytes(r.array("header length")?) as usize;
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|_| Error::Malformed("header is not UTF-8".into()))?;
    let config = VariantConfig::from_kv_str(header)?;
    let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
    let mut table = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.array::<1>("dtype")?[0];
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(r.array("shape")?) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Malformed(format!("shape of {name} overflows")))?;
        let data: Vec<f32> = match dtype {
            DTYPE_F32 => r
                .take(numel.saturating_mul(4), &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            DTYPE_F64 => r
                .take(numel.saturating_mul(8), &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                .collect(),
            other => return Err(Error::Malformed(format!("{name}: unknown dtype {other}"))),
        };
        if table.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != r.buf.len() {
        return Err(Error::Malformed(format!("{} unread body bytes", r.buf.len() - r.pos)));
    }
    Model::from_params(config, table)
}

/// Reads a weight file. Checks run in order: magic, version, length,
/// checksum, then structure against the embedded config.
pub fn load_weights(path: impl AsRef<Path>) -> Result<Model> {
    decode_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_variant;
    use crate::rng::Rng;

    fn toy() -> Model {
        build_variant(&VariantConfig::toy(3), &mut Rng::new(9)).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = toy();
        let bytes = encode_weights(&m).unwrap();
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for ((na, a), (nb, b)) in m.params().iter().zip(back.params()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(encode_weights(&back).unwrap(), bytes);
    }

    #[test]
    fn fault_order() {
        let bytes = encode_weights(&toy()).unwrap();
        assert!(matches!(decode_weights(&[]), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_weights(&bad), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(matches!(decode_weights(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(decode_weights(&bytes[..10]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(decode_weights(&bad), Err(Error::Checksum { .. })));
    }
}

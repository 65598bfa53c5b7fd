use std::fs;

use rfk_core::model::{build_variant, decode_weights, encode_weights, load_weights, save_weights, VariantConfig};
use rfk_core::{Error, Rng, Shape};

fn toy() -> rfk_core::model::Model {
    let mut cfg = VariantConfig::toy(5);
    cfg.head_widths = vec![12];
    cfg.attn_eps = 1e-5;
    build_variant(&cfg, &mut Rng::new(21)).unwrap()
}

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.rfkw");
    let m = toy();
    save_weights(&m, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params(), m.params());
    for (a, b) in m.params().values().zip(back.params().values()) {
        let bits = |t: &rfk_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let x = Rng::new(3).tensor(Shape::new(2, 3, 32, 32), -1.0, 1.0);
    assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    assert_eq!(fs::read(&path).unwrap(), encode_weights(&back).unwrap());
}

#[test]
fn every_flipped_byte_is_rejected() {
    let bytes = encode_weights(&toy()).unwrap();
    let step = (bytes.len() / 97).max(1);
    for i in (0..bytes.len()).step_by(step) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x5a;
        assert!(decode_weights(&bad).is_err(), "byte {i} of {}", bytes.len());
    }
}

#[test]
fn payload_corruption_is_a_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.rfkw");
    save_weights(&toy(), &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_weights(&path), Err(Error::Checksum { .. })));
}

#[test]
fn distinct_errors() {
    let bytes = encode_weights(&toy()).unwrap();
    assert!(matches!(decode_weights(&[]), Err(Error::BadMagic)));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_weights(&magic), Err(Error::BadMagic)));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_weights(&version), Err(Error::VersionMismatch { found: 9, .. })));
    assert!(matches!(decode_weights(&bytes[..bytes.len() - 10]), Err(Error::Truncated(_))));
    assert!(matches!(decode_weights(&bytes[..5]), Err(Error::Truncated(_))));
    let mut crc = bytes.clone();
    let last = crc.len() - 1;
    crc[last] ^= 0xff;
    assert!(matches!(decode_weights(&crc), Err(Error::Checksum { .. })));
}

#[test]
fn empty_file_is_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.rfkw");
    fs::write(&path, b"").unwrap();
    assert!(matches!(load_weights(&path), Err(Error::BadMagic)));
    assert!(matches!(load_weights(dir.path().join("missing")), Err(Error::Io(_))));
}

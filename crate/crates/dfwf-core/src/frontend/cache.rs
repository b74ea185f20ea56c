//! On-disk feature cache.
//!
//! One binary record per utterance: header `{magic "LFCC", version u16,
//! rows u16, cols u32}` followed by row-major little-endian 32-bit floats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;

const MAGIC: &[u8; 4] = b"LFCC";
const VERSION: u16 = 1;

pub fn write_feature_cache(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    if f.rows() > u16::MAX as usize {
        return Err(Error::InvalidConfig(format!(
            "feature cache supports at most {} rows, got {}",
            u16::MAX,
            f.rows()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * f.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(f.rows() as u16).to_le_bytes());
    out.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    for &v in f.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let fail = |reason: &str| Error::Checkpoint(format!("{}: {reason}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(fail("not a feature cache file"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported cache version {version}")));
    }
    let rows = u16::from_le_bytes(bytes[6..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "expected {expected} bytes for {rows}x{cols}, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    FeatureMatrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.lfcc");
        let data: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37 - 5.0) as f32 as f64).collect();
        let f = FeatureMatrix::new(6, 10, data).unwrap();
        write_feature_cache(&p, &f).unwrap();
        let back = read_feature_cache(&p).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.lfcc");
        std::fs::write(&p, b"NOPE12345678").unwrap();
        assert!(read_feature_cache(&p).is_err());
    }
}

//! Binary model checkpoints.
//!
//! Layout: magic `DFWF`, format version, a length-prefixed UTF-8 TOML
//! document (model config plus training-step metadata), then one record per
//! parameter: length-prefixed name, rank, dimensions, and little-endian
//! 32-bit floats. Parameters are kept on the f32 grid in memory, so a
//! save/load round-trip reproduces forward outputs bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, LcnnConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DFWF";
const VERSION: u16 = 1;

/// Training-step provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub task_id: String,
    pub epoch: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    config: LcnnConfig,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Classifier,
    meta: &CheckpointMeta,
) -> Result<()> {
    let header = Header { meta: meta.clone(), config: model.config().clone() };
    let text = toml::to_string(&header)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params().iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Classifier, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let fail = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4)? != MAGIC {
        return Err(fail("bad magic, not a checkpoint".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let text_len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(text_len)?)
        .map_err(|_| fail("header is not UTF-8".into()))?;
    let header: Header =
        toml::from_str(text).map_err(|e| fail(format!("header parse error: {e}")))?;

    let mut model = Classifier::new(header.config)?;
    let count = cur.u32()? as usize;
    if count != model.params().len() {
        return Err(fail(format!(
            "parameter count {count} does not match config ({})",
            model.params().len()
        )));
    }
    for i in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| fail("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64);
        }
        let slot = model.params_mut().get_mut(i);
        if slot.name != name {
            return Err(fail(format!(
                "parameter {i} is named {name:?}, config expects {:?}",
                slot.name
            )));
        }
        if slot.value.shape() != shape.as_slice() {
            return Err(fail(format!(
                "parameter {name} has shape {shape:?}, config expects {:?}",
                slot.value.shape()
            )));
        }
        slot.value = Tensor::from_vec(&shape, data)?;
    }
    if cur.pos != bytes.len() {
        return Err(fail("trailing bytes after last parameter".into()));
    }
    Ok((model, header.meta))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FeatureMatrix;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dfwf");
        let model = Classifier::new(LcnnConfig { init_seed: 3, ..Default::default() }).unwrap();
        let meta = CheckpointMeta { task_id: "t1".into(), epoch: 4, seed: 3 };
        save_checkpoint(&p, &model, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&p).unwrap();
        assert_eq!(meta, meta2);

        let f = FeatureMatrix::new(60, 320, (0..60 * 320).map(|i| (i % 97) as f64 / 97.0).collect())
            .unwrap();
        let a = model.forward_logits(&[&f]).unwrap();
        let b = loaded.forward_logits(&[&f]).unwrap();
        assert_eq!(a, b);
        let ea = model.forward_embedding(&[&f]).unwrap();
        let eb = loaded.forward_embedding(&[&f]).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.dfwf");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}

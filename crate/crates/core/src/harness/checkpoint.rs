//! `.plada` checkpoint files.
//!
//! Layout: the magic `PLADA1`; a little-endian `u64` length and the backbone
//! config as JSON; a `u64` tensor count and one table entry per tensor (`u32`
//! name length, name, `u32` rank, `u64` dims, `u64` byte offset into the data
//! section); then the data section of little-endian `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, BackboneConfig, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"PLADA1";

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&model.cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(BackboneConfig, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing PLADA1 magic".into()));
    }
    let n = r.len()?;
    let cfg: BackboneConfig = serde_json::from_slice(r.take(n)?)?;
    let count = r.len()?;
    let mut table = Vec::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let offset = r.len()?;
        table.push((name, shape, offset));
    }
    let data = &bytes[r.pos..];
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in table {
        let numel: usize = shape.iter().product();
        let raw = offset
            .checked_add(8 * numel)
            .and_then(|end| data.get(offset..end))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the data section")))?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(&shape, values)?));
    }
    Ok((cfg, out))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode(model)?)?)
}

/// Rebuilds the model stored at `path`. With `expected`, the stored backbone
/// must equal it.
pub fn load(path: &Path, expected: Option<&BackboneConfig>) -> Result<Model> {
    let (cfg, tensors) = decode(&fs::read(path)?)?;
    if let Some(e) = expected {
        if *e != cfg {
            return Err(Error::Checkpoint(format!(
                "{} was trained with backbone {} but the config asks for {}",
                path.display(),
                serde_json::to_string(&cfg)?,
                serde_json::to_string(e)?
            )));
        }
    }
    let mut model = build_model(&cfg, 0)?;
    model.load_params(tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig { depth: 2, dim: 8, heads: 2, patch: 16, n_b2e: 1, prompt_len: 2, pool_size: 2, mlp_ratio: 2, ..Default::default() }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = build_model(&small(), 9).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..6], b"PLADA1");
        let (cfg, tensors) = decode(&bytes).unwrap();
        assert_eq!(cfg, small());
        let mut back = build_model(&cfg, 0).unwrap();
        back.load_params(tensors).unwrap();
        assert_eq!(back.params, m.params);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&build_model(&small(), 1).unwrap()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"PLADA0").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn config_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.plada");
        save(&build_model(&small(), 2).unwrap(), &p).unwrap();
        assert!(load(&p, Some(&small())).is_ok());
        let other = BackboneConfig { pool_size: 3, ..small() };
        assert!(matches!(load(&p, Some(&other)), Err(Error::Checkpoint(_))));
    }
}

use std::path::Path;

use super::config::ModelConfig;
use super::network::MvpModel;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MVPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes `model`: magic, version, length-prefixed config JSON, one
/// record per tensor (name, shape, little-endian f64 payload), then a CRC32
/// of everything before it.
pub fn encode_checkpoint(model: &MvpModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
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
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::TruncatedPayload {
            expected: self.pos.saturating_add(n),
            found: self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::DimensionOverflow("length exceeds usize".into()))
    }
}

fn describe(cfg: &ModelConfig) -> String {
    serde_json::to_string(cfg).unwrap_or_else(|_| format!("{cfg:?}"))
}

fn check_config(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if found == expected {
        return Ok(());
    }
    let detail = if found.resolution != expected.resolution {
        format!(
            "checkpoint resolution {} does not match expected resolution {}",
            found.resolution, expected.resolution
        )
    } else {
        "model configurations differ".to_string()
    };
    Err(Error::ConfigMismatch {
        detail,
        expected: describe(expected),
        found: describe(found),
    })
}

/// Inverse of [`encode_checkpoint`]. With `expected`, the embedded config
/// must match it exactly.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<MvpModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.bytes(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedPayload {
            expected: 12,
            found: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let json_len = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.bytes(json_len)?)?;
    if let Some(exp) = expected {
        check_config(&config, exp)?;
    }
    let mut model = MvpModel::new(config)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint holds {count} tensors, model expects {}",
            model.params().len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (name, p) in model.param_names().iter().zip(model.params()) {
        let n = r.u32()? as usize;
        let found = std::str::from_utf8(r.bytes(n)?).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        if found != name {
            return Err(Error::InvalidArgument(format!("expected tensor {name}, found {found}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if shape != p.shape() {
            return Err(Error::shape("decode_checkpoint", format!("{name}: {shape:?} vs {:?}", p.shape())));
        }
        let data = r
            .bytes(p.len() * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after tensors",
            body.len() - r.pos
        )));
    }
    model.set_params(params)?;
    Ok(model)
}

pub fn save_checkpoint(model: &MvpModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<MvpModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

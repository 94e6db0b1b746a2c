//! `NNCK1` checkpoint container, little-endian:
//!
//! | field                        | type        |
//! |------------------------------|-------------|
//! | magic `"NNCK1\0"`            | 6 bytes     |
//! | version = 1                  | u16         |
//! | tensor count                 | u32         |
//! | per tensor: name length      | u32         |
//! |             name             | UTF-8       |
//! |             rank, dims       | u32 each    |
//! |             values           | f64 array   |
//! | config length                | u32         |
//! | config                       | UTF-8 JSON  |

use std::fs;
use std::path::Path;

use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"NNCK1\0";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(tensors: &ParamSet, config: &serde_json::Value) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (_, name, t) in tensors.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(config)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamSet, serde_json::Value)> {
    let mut cur = Cursor::new(bytes);
    if cur.take(6)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected NNCK1".into(),
        });
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 6,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32()?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let at = cur.offset();
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = cur.f64s(numel)?;
        set.add(name, Tensor::new(&shape, data)?);
    }
    let len = cur.u32()? as usize;
    let at = cur.offset();
    let json = cur.take(len)?;
    if !cur.is_done() {
        return cur.fail("trailing bytes after config");
    }
    let config = serde_json::from_slice(json).map_err(|e| Error::Format {
        offset: at,
        msg: format!("config: {e}"),
    })?;
    Ok((set, config))
}

pub fn write_checkpoint(path: &Path, tensors: &ParamSet, config: &serde_json::Value) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors, config)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    decode_checkpoint(&fs::read(path)?)
}

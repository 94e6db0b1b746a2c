//! `PDEB1` dataset container, little-endian:
//!
//! | field                          | type         |
//! |--------------------------------|--------------|
//! | magic `"PDEB1\0"`              | 6 bytes      |
//! | version = 1                    | u16          |
//! | kind (0 advection, 1 burgers)  | u8           |
//! | parameter                      | f64          |
//! | n_traj, n_t + 1, c, n_x        | u32 each     |
//! | dt, dx                         | f64 each     |
//! | values, row-major              | f64 array    |
//! | metadata length                | u32          |
//! | metadata                       | UTF-8 JSON   |

use std::fs;
use std::path::Path;

use super::{Grid1D, ParamGroup, PdeKind, PdeParams, Split, Trajectory};
use crate::binio::Cursor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"PDEB1\0";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 6 + 2 + 1 + 8 + 4 * 4 + 8 * 2;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} = {v} does not fit in u32")))
}

/// Serialize one parameter group.
pub fn encode_group(group: &ParamGroup) -> Result<Vec<u8>> {
    let grid = group
        .grid()
        .ok_or_else(|| Error::Data("cannot write an empty group".into()))?;
    let n_traj = group.trajectories.len();
    let frames = grid.n_t + 1;
    let mut buf = Vec::with_capacity(HEADER_LEN + n_traj * frames * grid.n_x * 8 + 256);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(group.params.kind.code());
    buf.extend_from_slice(&group.params.value.to_le_bytes());
    buf.extend_from_slice(&to_u32(n_traj, "n_traj")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(frames, "n_t + 1")?.to_le_bytes());
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&to_u32(grid.n_x, "n_x")?.to_le_bytes());
    buf.extend_from_slice(&grid.dt.to_le_bytes());
    buf.extend_from_slice(&grid.dx().to_le_bytes());
    for t in &group.trajectories {
        if t.grid != grid || t.u.len() != frames * grid.n_x {
            return Err(Error::Data(
                "trajectories in a group must share a grid".into(),
            ));
        }
        for v in &t.u {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut meta = group.metadata.clone();
    if let Some(obj) = meta.as_object_mut() {
        obj.insert("split".into(), group.split.name().into());
        obj.insert("length".into(), grid.length.into());
    }
    let json = serde_json::to_vec(&meta)?;
    buf.extend_from_slice(&to_u32(json.len(), "metadata length")?.to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(buf)
}

pub fn decode_group(bytes: &[u8]) -> Result<ParamGroup> {
    let mut cur = Cursor::new(bytes);
    if cur.take(6)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected PDEB1".into(),
        });
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 6,
            msg: format!("unsupported version {version}"),
        });
    }
    let at = cur.offset();
    let kind = PdeKind::from_code(cur.u8()?).ok_or_else(|| Error::Format {
        offset: at,
        msg: "unknown PDE kind".into(),
    })?;
    let value = cur.f64()?;
    let n_traj = cur.u32()? as usize;
    let frames = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    let n_x = cur.u32()? as usize;
    let dt = cur.f64()?;
    let dx = cur.f64()?;
    if channels != 1 {
        return cur.fail(format!(
            "only single-channel fields are supported, got {channels}"
        ));
    }
    if frames < 2 {
        return cur.fail("need at least two frames");
    }
    let data = cur.f64s(n_traj * frames * channels * n_x)?;
    let json_len = cur.u32()? as usize;
    let json = cur.take(json_len)?;
    if !cur.is_done() {
        return cur.fail("trailing bytes after metadata");
    }
    let metadata: serde_json::Value = serde_json::from_slice(json).map_err(|e| Error::Format {
        offset: (bytes.len() - json_len) as u64,
        msg: format!("metadata: {e}"),
    })?;
    let split = match metadata.get("split").and_then(|s| s.as_str()) {
        Some("test") => Split::Test,
        _ => Split::Train,
    };
    let length = metadata
        .get("length")
        .and_then(|v| v.as_f64())
        .unwrap_or(dx * n_x as f64);
    let grid = Grid1D {
        n_x,
        length,
        n_t: frames - 1,
        dt,
    };
    let params = PdeParams::new(kind, value).map_err(|e| Error::Format {
        offset: 9,
        msg: e.to_string(),
    })?;
    let per = frames * n_x;
    let trajectories = data
        .chunks_exact(per)
        .map(|c| Trajectory {
            grid,
            params,
            u: c.to_vec(),
        })
        .collect();
    Ok(ParamGroup {
        params,
        split,
        trajectories,
        metadata,
    })
}

pub fn write_group(path: &Path, group: &ParamGroup) -> Result<()> {
    fs::write(path, encode_group(group)?)?;
    Ok(())
}

pub fn read_group(path: &Path) -> Result<ParamGroup> {
    decode_group(&fs::read(path)?)
}

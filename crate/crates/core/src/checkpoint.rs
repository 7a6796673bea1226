//! Checkpoint files.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "HVCK" version
//! repeated until EOF:
//!     name_len name_bytes rank dims[rank] data[f32 LE; product(dims)]
//! ```
//!
//! Values are stored as f32 whatever the training precision.

use std::fs;
use std::path::Path;

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::ndtensor::{Scalar, Tensor};
use crate::nets::{Model, Param};

pub const MAGIC: &[u8; 4] = b"HVCK";
pub const VERSION: u32 = 1;

/// Name of the entry carrying the covariance-constraint flag (0 or 1).
pub const COVARIANCE_FLAG: &str = "config.covariance_constraint";

pub fn encode(entries: &[Param<f32>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in entries {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Param<f32>>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.pos();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            at,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let mut entries = Vec::new();
    while r.remaining() > 0 {
        let name_len = r.u32("name length")? as usize;
        let at = r.pos();
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
            .to_owned();
        let at = r.pos();
        let rank = r.u32("rank")? as usize;
        if rank == 0 {
            return Err(Error::format(at, format!("parameter `{name}` has rank 0")));
        }
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(at, "dimension product overflows"))?;
        let data = r.f32s(len, "parameter data")?;
        entries.push(Param {
            name,
            value: Tensor::new(dims, data)?,
        });
    }
    Ok(entries)
}

/// Writes through a temporary file and a rename, so an existing checkpoint at
/// `path` is never left half-written.
pub fn write(path: &Path, entries: &[Param<f32>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, encode(entries))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Param<f32>>> {
    decode(&fs::read(path)?)
}

/// Model parameters plus the covariance flag, as f32 entries.
pub fn model_entries<T: Scalar>(model: &Model<T>) -> Vec<Param<f32>> {
    let mut out: Vec<Param<f32>> = model
        .params()
        .iter()
        .map(|p| Param {
            name: p.name.clone(),
            value: p.value.cast(),
        })
        .collect();
    out.push(Param {
        name: COVARIANCE_FLAG.into(),
        value: Tensor::scalar(if model.covariance_constraint() {
            1.0
        } else {
            0.0
        }),
    });
    out
}

/// Rebuilds a model from checkpoint entries; unrelated entries are ignored.
pub fn model_from_entries<T: Scalar>(entries: &[Param<f32>]) -> Result<Model<T>> {
    let cc = entries
        .iter()
        .find(|p| p.name == COVARIANCE_FLAG)
        .map(|p| p.value.data().first() == Some(&1.0))
        .unwrap_or(false);
    let params = entries
        .iter()
        .filter(|p| {
            !p.name.starts_with("config.")
                && !p.name.starts_with("optim.")
                && !p.name.starts_with("train.")
        })
        .map(|p| Param {
            name: p.name.clone(),
            value: p.value.cast(),
        })
        .collect();
    Model::from_params(params, cc)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    model_from_entries(&read(path)?)
}

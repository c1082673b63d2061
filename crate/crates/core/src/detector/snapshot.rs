//! Self-describing snapshot files.
//!
//! Layout: the 8-byte magic `IAQDSNAP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header
//! (`{"spec": .., "phase": .., "params": [{"name", "shape"}, ..]}`), then every
//! parameter's values as little-endian `f64` in header order. Values are
//! stored bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorSpec, ModelSnapshot, Param, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"IAQDSNAP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: DetectorSpec,
    phase: usize,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

pub fn write_snapshot<W: Write>(snapshot: &ModelSnapshot, mut w: W) -> Result<()> {
    let header = Header {
        spec: snapshot.spec.clone(),
        phase: snapshot.phase,
        params: snapshot
            .params
            .params()
            .iter()
            .map(|p| ParamHeader {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in snapshot.params.params() {
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<ModelSnapshot> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut params = Vec::with_capacity(header.params.len());
    let mut buf = [0u8; 8];
    for ph in header.params {
        let n: usize = ph.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(Param {
            name: ph.name,
            shape: ph.shape,
            data,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(ModelSnapshot {
        spec: header.spec,
        phase: header.phase,
        params: ParamStore::from_params(params),
    })
}

pub fn save(snapshot: &ModelSnapshot, path: impl AsRef<Path>) -> Result<()> {
    write_snapshot(snapshot, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelSnapshot> {
    read_snapshot(BufReader::new(File::open(path)?))
}

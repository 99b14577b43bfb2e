//! Checkpoint container.
//!
//! Layout (little-endian):
//! `b"PNPCMCK\0"`, `u32` format version, `u64` header length, a JSON header
//! (config, channel shape, normalization scale, parameter table, blob order),
//! then one `f32` blob per parameter set in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{ParamEntry, UNet};
use super::{CmConfig, ConsistencyModel, ParamSet};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PNPCMCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const BLOBS: [&str; 2] = ["ema", "online"];

#[derive(Serialize, Deserialize)]
struct Header {
    config: CmConfig,
    n_r: usize,
    n_t: usize,
    scale: f64,
    params: Vec<ParamEntry>,
    blobs: Vec<String>,
}

pub fn save_checkpoint(model: &ConsistencyModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &ConsistencyModel, w: &mut W) -> Result<()> {
    let (n_r, n_t) = model.shape();
    let header = Header {
        config: model.config().clone(),
        n_r,
        n_t,
        scale: model.scale(),
        params: model.net().entries().to_vec(),
        blobs: BLOBS.iter().map(|s| s.to_string()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for set in [ParamSet::Ema, ParamSet::Online] {
        for v in model.params(set) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ConsistencyModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => corrupt(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ConsistencyModel> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    read_exact(r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "checkpoint format {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    read_exact(r, &mut len, "header length")?;
    let len = u64::from_le_bytes(len);
    if len > 64 << 20 {
        return Err(corrupt(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    read_exact(r, &mut json, "header")?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(format!("bad header: {e}")))?;
    header.config.validate().map_err(|e| corrupt(e.to_string()))?;
    if !(header.scale.is_finite() && header.scale > 0.0) {
        return Err(corrupt("non-positive normalization scale"));
    }
    let net = UNet::new(&header.config.backbone, header.n_r, header.n_t).map_err(|e| corrupt(e.to_string()))?;
    let expected: Vec<(&str, &[usize], usize)> = net
        .entries()
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice(), e.offset))
        .collect();
    let found: Vec<(&str, &[usize], usize)> = header
        .params
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice(), e.offset))
        .collect();
    if expected != found {
        return Err(corrupt("parameter table does not match the backbone config"));
    }
    if header.blobs != BLOBS {
        return Err(corrupt(format!("unexpected blob list {:?}", header.blobs)));
    }
    let n = net.param_count();
    let mut blobs = Vec::with_capacity(2);
    let mut bytes = vec![0u8; n * 4];
    for name in BLOBS {
        read_exact(r, &mut bytes, name)?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blobs.push(vals);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after parameter blobs"));
    }
    let online = blobs.pop().expect("two blobs");
    let ema = blobs.pop().expect("two blobs");
    Ok(ConsistencyModel::from_parts(header.config, net, online, ema, header.scale))
}

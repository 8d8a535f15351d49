//! Binary ensemble checkpoints and canonical config hashing.
//!
//! Layout, little-endian: magic `NANBUCKP`, `u32` version, `u64` N, `f64`
//! time, `u64` seed, 32-byte config hash, then N velocity triples as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::particles::Ensemble;
use crate::Vec3;

pub const MAGIC: &[u8; 8] = b"NANBUCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub time: f64,
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub velocities: Vec<Vec3>,
}

/// SHA-256 of the canonical JSON form of `value` (object keys sorted), so the
/// hash ignores field order in the source text.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<[u8; 32]> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let text = serde_json::to_string(&v).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

pub fn write(path: &Path, ens: &Ensemble, config_hash: &[u8; 32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ens.len() as u64).to_le_bytes())?;
    w.write_all(&ens.time.to_le_bytes())?;
    w.write_all(&ens.key.seed().to_le_bytes())?;
    w.write_all(config_hash)?;
    for v in &ens.velocities {
        for c in v.0 {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    if &take::<8>(&mut r)? != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n = u64::from_le_bytes(take(&mut r)?) as usize;
    let time = f64::from_le_bytes(take(&mut r)?);
    let seed = u64::from_le_bytes(take(&mut r)?);
    let config_hash = take::<32>(&mut r)?;
    let mut velocities = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let x = f64::from_le_bytes(take(&mut r)?);
        let y = f64::from_le_bytes(take(&mut r)?);
        let z = f64::from_le_bytes(take(&mut r)?);
        velocities.push(Vec3::new(x, y, z));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    Ok(Checkpoint {
        time,
        seed,
        config_hash,
        velocities,
    })
}

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{LdmError, Result};

pub const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    task: serde_json::Value,
    seed: u64,
    version: u32,
    arrays: Vec<(String, Vec<usize>)>,
}

fn fmt_err(e: impl std::fmt::Display) -> LdmError {
    LdmError::Format(e.to_string())
}

/// Hex SHA-256 of the canonical JSON of `(task, seed, version)`.
pub fn cache_key(task: &serde_json::Value, seed: u64) -> String {
    let canon = serde_json::json!({ "task": task, "seed": seed, "version": CACHE_VERSION });
    let digest = Sha256::digest(canon.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn path_for(dir: &Path, task: &serde_json::Value, seed: u64) -> PathBuf {
    dir.join(format!("{}.ldmcache", cache_key(task, seed)))
}

/// Writes `u64 LE header length`, the JSON header, then each array as
/// little-endian `f64`. Returns the file path.
pub fn save_cached(dir: &Path, task: &serde_json::Value, seed: u64, arrays: &[(&str, &Tensor)]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let header = Header {
        task: task.clone(),
        seed,
        version: CACHE_VERSION,
        arrays: arrays.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(fmt_err)?;
    let path = path_for(dir, task, seed);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, t) in arrays {
        for x in t.data() {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(path)
}

/// Loads a cached dataset if one exists for exactly this task, seed and
/// version.
pub fn load_cached(dir: &Path, task: &serde_json::Value, seed: u64) -> Result<Option<Vec<(String, Tensor)>>> {
    let path = path_for(dir, task, seed);
    if !path.exists() {
        return Ok(None);
    }
    let mut f = std::io::BufReader::new(std::fs::File::open(&path)?);
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(fmt_err)?;
    if header.version != CACHE_VERSION || header.seed != seed || &header.task != task {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(header.arrays.len());
    let mut buf = [0u8; 8];
    for (name, shape) in header.arrays {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            f.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(Some(out))
}

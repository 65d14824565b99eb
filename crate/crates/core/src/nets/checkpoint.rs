use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{LdmError, Result};

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `u64 LE header length`, a JSON header of names and shapes, then
/// every tensor's data as little-endian `f64`.
pub fn save_checkpoint(path: &Path, params: &[(String, &Tensor)]) -> Result<()> {
    let header: Vec<Entry> = params
        .iter()
        .map(|(n, t)| Entry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| LdmError::Format(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, t) in params {
        for x in t.data() {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut json)?;
    let header: Vec<Entry> =
        serde_json::from_slice(&json).map_err(|e| LdmError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(header.len());
    let mut buf = [0u8; 8];
    for e in header {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            f.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

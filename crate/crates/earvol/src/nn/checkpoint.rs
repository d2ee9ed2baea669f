//! Flat binary checkpoint format for model weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EARVOLT1"
//! kind     u32 length + UTF-8 tag (e.g. "eargate.custom_cnn")
//! nconf    u32, then nconf of (u32 len + key, u32 len + value)
//! ntensors u32
//! tensor   u32 ndim, ndim × u64 dims, then f32 LE data
//! ```
//!
//! Tensors are positional: the model builder reconstructs the architecture
//! from the config entries and then consumes tensors in its save order.

use super::NnError;
use ndarray::ArrayD;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"EARVOLT1";

/// In-memory checkpoint contents.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<ArrayD<f32>>,
}

impl Checkpoint {
    pub fn config_get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn config_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, NnError> {
        self.config_get(key)
            .ok_or_else(|| NnError::Checkpoint(format!("missing config key {key}")))?
            .parse::<T>()
            .map_err(|_| NnError::Checkpoint(format!("bad config value for {key}")))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NnError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_str(&mut w, &ckpt.kind)?;
    w.write_all(&(ckpt.config.len() as u32).to_le_bytes())?;
    for (k, v) in &ckpt.config {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for t in &ckpt.tensors {
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let data = t
            .as_slice()
            .map(|s| s.to_vec())
            .unwrap_or_else(|| t.iter().copied().collect());
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let kind = read_str(&mut r)?;
    let nconf = read_u32(&mut r)? as usize;
    let mut config = Vec::with_capacity(nconf);
    for _ in 0..nconf {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        config.push((k, v));
    }
    let ntensors = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(ntensors);
    for _ in 0..ntensors {
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(NnError::Checkpoint("implausible tensor rank".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(
            ArrayD::from_shape_vec(shape, data)
                .map_err(|e| NnError::Checkpoint(e.to_string()))?,
        );
    }
    Ok(Checkpoint {
        kind,
        config,
        tensors,
    })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, NnError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(NnError::Checkpoint("implausible string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NnError::Checkpoint(e.to_string()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint {
            kind: "test.model".into(),
            config: vec![("input".into(), "96".into()), ("seed".into(), "7".into())],
            tensors: vec![
                ArrayD::from_shape_fn(vec![2, 3, 4], |ix| {
                    (ix[0] * 12 + ix[1] * 4 + ix[2]) as f32 * 0.25 - 1.0
                }),
                ArrayD::from_elem(vec![5], 1.5f32),
            ],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.kind, "test.model");
        assert_eq!(back.config_get("input"), Some("96"));
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensors[0], ckpt.tensors[0]);
        assert_eq!(back.tensors[1], ckpt.tensors[1]);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}

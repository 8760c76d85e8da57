//! Versioned checkpoint container: a small binary format holding named f64
//! tensors plus a JSON metadata header. Writes are atomic (temp + rename).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"IKDC";
const VERSION: u32 = 1;

/// Descriptive header stored alongside the tensors.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    /// Which pipeline stage produced this (teacher, selectors, student, spot).
    pub stage: String,
    /// Global step at save time.
    pub step: u64,
    /// Hash of the config that drove the run.
    pub config_hash: String,
    /// Hash of the library sources.
    pub src_hash: String,
    /// Free-form numeric results (final mAP, losses, ...).
    #[serde(default)]
    pub metrics: std::collections::BTreeMap<String, f64>,
    /// Extra context (scene seeds of a spot-checked batch, variant name, ...).
    #[serde(default)]
    pub notes: std::collections::BTreeMap<String, String>,
}

/// Parameter arrays plus metadata, in insertion order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Serialize to `path` atomically: the file appears complete or not at all.
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta_json = serde_json::to_vec(meta)?;
        write_u64(&mut w, meta_json.len() as u64)?;
        w.write_all(&meta_json)?;
        write_u64(&mut w, tensors.len() as u64)?;
        for (name, t) in tensors {
            let name_bytes = name.as_bytes();
            write_u64(&mut w, name_bytes.len() as u64)?;
            w.write_all(name_bytes)?;
            write_u64(&mut w, t.dims().len() as u64)?;
            for &d in t.dims() {
                write_u64(&mut w, d as u64)?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;
    let count = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let ndims = read_u64(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(read_u64(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    Ok(Checkpoint { meta, tensors })
}

/// Bit-exact equality of two parameter lists (names, shapes, and values).
pub fn params_identical(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ta), (nb, tb))| {
            na == nb && ta.dims() == tb.dims() && ta.data() == tb.data()
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_tensor;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut meta = CheckpointMeta {
            stage: "teacher".into(),
            step: 1234,
            config_hash: "abcd".into(),
            src_hash: "ef01".into(),
            ..Default::default()
        };
        meta.metrics.insert("map".into(), 0.62);
        meta.notes.insert("variant".into(), "liaf".into());
        let tensors = vec![
            ("w1".to_string(), rand_tensor(&[4, 3, 3, 3], 1)),
            ("b1".to_string(), rand_tensor(&[4], 2)),
            ("scalar".to_string(), Tensor::scalar(7.5)),
        ];
        save_checkpoint(&path, &meta, &tensors).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta.stage, "teacher");
        assert_eq!(back.meta.step, 1234);
        assert_eq!(back.meta.metrics["map"], 0.62);
        assert_eq!(back.meta.notes["variant"], "liaf");
        assert!(params_identical(&tensors, &back.tensors));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn no_temp_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &CheckpointMeta::default(), &[]).unwrap();
        let entries: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(entries, vec!["m.ckpt".to_string()]);
    }
}

//! Self-describing key-value tensor container.
//!
//! Layout (all integers little-endian):
//! magic `PLPT1`, then a u64 record count, then per record:
//! u64 name length, UTF-8 name bytes, u64 dim count, u64 dims, and the
//! payload as 32-bit little-endian floats (row-major). Values are widened
//! back to f64 on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 5] = b"PLPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic header (not a PLPT1 file)")]
    BadMagic,
    #[error("record {index}: {msg}")]
    Corrupt { index: usize, msg: String },
}

pub fn save(path: &Path, entries: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u64(&mut r, 0)? as usize;
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let name_len = read_u64(&mut r, index)? as usize;
        if name_len > 1 << 20 {
            return Err(CheckpointError::Corrupt {
                index,
                msg: format!("implausible name length {}", name_len),
            });
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::Corrupt { index, msg: e.to_string() })?;
        let ndims = read_u64(&mut r, index)? as usize;
        if ndims > 8 {
            return Err(CheckpointError::Corrupt { index, msg: format!("rank {} too large", ndims) });
        }
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u64(&mut r, index)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| CheckpointError::Corrupt { index, msg: e.to_string() })?;
        out.push((name, tensor));
    }
    Ok(out)
}

fn read_u64(r: &mut impl Read, index: usize) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Corrupt {
        index,
        msg: "unexpected end of file".into(),
    })?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        // values representable in f32 survive the roundtrip bit-exactly
        let t1 = Tensor::new(&[2, 3], vec![1.5, -2.25, 0.0, 4.0, 0.125, -8.5]).unwrap();
        let t2 = Tensor::scalar(3.0);
        save(&path, &[("a.weight".into(), &t1), ("b".into(), &t2)]).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "a.weight");
        assert_eq!(loaded[0].1, t1);
        assert_eq!(loaded[1].1, t2);
    }

    #[test]
    fn double_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        let t = Tensor::from_vec(vec![0.1, 0.2, core::f64::consts::PI]);
        save(&p1, &[("x".into(), &t)]).unwrap();
        let first = load(&p1).unwrap();
        save(&p2, &[("x".into(), &first[0].1)]).unwrap();
        let second = load(&p2).unwrap();
        // first save rounds to f32; the second roundtrip is exact
        assert_eq!(first[0].1, second[0].1);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTAPLPT").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let t = Tensor::from_vec(vec![1.0; 100]);
        save(&path, &[("x".into(), &t)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 13]).unwrap();
        assert!(load(&path).is_err());
    }
}

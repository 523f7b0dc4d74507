//! Single-file checkpoint: a manifest of named buffers followed by raw
//! little-endian f64 data. Running statistics are stored alongside
//! trainable parameters so a round trip restores the model exactly.
//!
//! Layout:
//!   magic "ASTA3D-CKPT-1"
//!   u32   entry count
//!   per entry: u32 name length, name bytes, u8 dtype (0 = f64),
//!              u32 rank, u64 dims..., u64 byte offset into the data block
//!   data block: f64 little-endian buffers at the recorded offsets

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::nn::ParamSet;

pub const MAGIC: &[u8] = b"ASTA3D-CKPT-1";
const DTYPE_F64: u8 = 0;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic,
    Truncated,
    UnsupportedDtype(u8),
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    MissingEntry { name: String },
    UnknownEntry { name: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {}", e),
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::Truncated => write!(f, "checkpoint file is truncated"),
            CheckpointError::UnsupportedDtype(d) => write!(f, "unsupported dtype tag {}", d),
            CheckpointError::ShapeMismatch { name, expected, found } => write!(
                f,
                "checkpoint entry '{}' has shape {:?}, model expects {:?}",
                name, found, expected
            ),
            CheckpointError::MissingEntry { name } => {
                write!(f, "checkpoint is missing entry '{}'", name)
            }
            CheckpointError::UnknownEntry { name } => {
                write!(f, "checkpoint entry '{}' does not exist in the model", name)
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for p in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(p.tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &p.tensor.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += (p.tensor.numel() * 8) as u64;
    }
    for p in params.iter() {
        for &v in &p.tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct RawEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn load_raw(path: &Path) -> Result<Vec<RawEntry>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 13];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf).map_err(|_| CheckpointError::Truncated)?;
        let mut dtype = [0u8; 1];
        read_exact(&mut r, &mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(CheckpointError::UnsupportedDtype(dtype[0]));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let offset = read_u64(&mut r)?;
        manifest.push((name, shape, offset));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut entries = Vec::with_capacity(count);
    for (name, shape, offset) in manifest {
        let numel: usize = shape.iter().product();
        let start = offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(CheckpointError::Truncated);
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(RawEntry { name, shape, data });
    }
    Ok(entries)
}

/// Restore every model parameter from the file. The file and the model
/// must describe exactly the same set of names and shapes.
pub fn load_into(params: &mut ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let entries = load_raw(path)?;
    for e in &entries {
        let Some(id) = params.id_of(&e.name) else {
            return Err(CheckpointError::UnknownEntry { name: e.name.clone() });
        };
        let expected = params.get(id).tensor.shape.clone();
        if expected != e.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: e.name.clone(),
                expected,
                found: e.shape.clone(),
            });
        }
    }
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    for name in names {
        if !entries.iter().any(|e| e.name == name) {
            return Err(CheckpointError::MissingEntry { name });
        }
    }
    for e in entries {
        let id = params.id_of(&e.name).unwrap();
        params.get_mut(id).tensor.data.copy_from_slice(&e.data);
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet {
        let mut params = ParamSet::new();
        params
            .register("fc.weight", vec![2, 3], vec![1.5, -2.25, 0.0, 3.5e-10, 1e300, -7.0], true)
            .unwrap();
        params
            .register("bn.running_mean", vec![3], vec![0.25, 0.5, 0.75], false)
            .unwrap();
        params
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("asta3d_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");
        let params = sample_params();
        save(&params, &path).unwrap();

        let mut restored = sample_params();
        for p in [("fc.weight", 6), ("bn.running_mean", 3)] {
            let id = restored.id_of(p.0).unwrap();
            restored.get_mut(id).tensor.data = vec![9.9; p.1];
        }
        load_into(&mut restored, &path).unwrap();
        for (a, b) in params.iter().zip(restored.iter()) {
            assert_eq!(a.tensor.data, b.tensor.data);
            assert!(a
                .tensor
                .data
                .iter()
                .zip(&b.tensor.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("asta3d_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOT-A-CHECKPOINT-FILE").unwrap();
        assert!(matches!(load_raw(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncated_body_is_rejected() {
        let dir = std::env::temp_dir().join("asta3d_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        save(&sample_params(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_raw(&path), Err(CheckpointError::Truncated)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join("asta3d_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("shape.ckpt");
        save(&sample_params(), &path).unwrap();
        let mut other = ParamSet::new();
        other.register("fc.weight", vec![3, 2], vec![0.0; 6], true).unwrap();
        other.register("bn.running_mean", vec![3], vec![0.0; 3], false).unwrap();
        assert!(matches!(
            load_into(&mut other, &path),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}

//! Binary sequence file format.
//!
//! Layout (all multi-byte values little-endian):
//!   magic "ASTA3D-SEQ-1"
//!   u32 frame count, u32 points per frame, u32 feature dim c,
//!   u8 has-labels flag, u8 task tag (0 classification, 1 segmentation)
//!   body: per point f64 x, y, z, t, f[0..c), then the label as an
//!   f64-encoded integer when the flag is set.
//!
//! Timestamps and labels must hold exact small integers; both are
//! validated on read.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geom::{GeomError, PointCloudSequence};
use crate::network::Task;

pub const MAGIC: &[u8] = b"ASTA3D-SEQ-1";

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    BadMagic,
    Truncated { expected_points: usize, actual_values: usize },
    NonIntegerTimestamp { value: f64 },
    NonIntegerLabel { value: f64 },
    BadTaskTag(u8),
    Geom(GeomError),
    UnsupportedClassCount { requested: usize, supported: usize },
    EmptyDataset,
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "sequence io error: {}", e),
            DataError::BadMagic => write!(f, "not a sequence file (bad magic)"),
            DataError::Truncated { expected_points, actual_values } => write!(
                f,
                "sequence body truncated: header promises {} points, body holds {} values",
                expected_points, actual_values
            ),
            DataError::NonIntegerTimestamp { value } => {
                write!(f, "timestamp {} is not an integer frame index", value)
            }
            DataError::NonIntegerLabel { value } => {
                write!(f, "label {} is not an integer class index", value)
            }
            DataError::BadTaskTag(tag) => write!(f, "unknown task tag {}", tag),
            DataError::Geom(e) => write!(f, "{}", e),
            DataError::UnsupportedClassCount { requested, supported } => {
                write!(f, "generator supports up to {} classes, {} requested", supported, requested)
            }
            DataError::EmptyDataset => write!(f, "dataset holds no sequences"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<GeomError> for DataError {
    fn from(e: GeomError) -> Self {
        DataError::Geom(e)
    }
}

fn task_tag(task: Task) -> u8 {
    match task {
        Task::Classification => 0,
        Task::Segmentation => 1,
    }
}

pub fn write_sequence(seq: &PointCloudSequence, task: Task, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&seq.frame_count().to_le_bytes())?;
    w.write_all(&(seq.points_per_frame() as u32).to_le_bytes())?;
    w.write_all(&(seq.feature_dim() as u32).to_le_bytes())?;
    w.write_all(&[seq.labels().is_some() as u8, task_tag(task)])?;
    for i in 0..seq.len() {
        let p = seq.positions()[i];
        w.write_all(&p[0].to_le_bytes())?;
        w.write_all(&p[1].to_le_bytes())?;
        w.write_all(&p[2].to_le_bytes())?;
        w.write_all(&(seq.timestamps()[i] as f64).to_le_bytes())?;
        for &v in seq.feature(i) {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(labels) = seq.labels() {
            w.write_all(&(labels[i] as f64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<(PointCloudSequence, Task), DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 12];
    r.read_exact(&mut magic).map_err(|_| DataError::BadMagic)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic);
    }
    let frame_count = read_u32(&mut r)?;
    let points_per_frame = read_u32(&mut r)? as usize;
    let feature_dim = read_u32(&mut r)? as usize;
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags).map_err(|_| truncation(frame_count, points_per_frame, 0))?;
    let has_labels = flags[0] != 0;
    let task = match flags[1] {
        0 => Task::Classification,
        1 => Task::Segmentation,
        other => return Err(DataError::BadTaskTag(other)),
    };

    let total_points = frame_count as usize * points_per_frame;
    let values_per_point = 4 + feature_dim + has_labels as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % 8 != 0 || body.len() / 8 != total_points * values_per_point {
        return Err(DataError::Truncated {
            expected_points: total_points,
            actual_values: body.len() / 8,
        });
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut positions = Vec::with_capacity(total_points);
    let mut timestamps = Vec::with_capacity(total_points);
    let mut features = Vec::with_capacity(total_points * feature_dim);
    let mut labels = has_labels.then(|| Vec::with_capacity(total_points));
    for chunk in values.chunks_exact(values_per_point) {
        positions.push([chunk[0], chunk[1], chunk[2]]);
        let t = chunk[3];
        if t.fract() != 0.0 || t < 0.0 || t >= u32::MAX as f64 {
            return Err(DataError::NonIntegerTimestamp { value: t });
        }
        timestamps.push(t as u32);
        features.extend_from_slice(&chunk[4..4 + feature_dim]);
        if let Some(l) = labels.as_mut() {
            let raw = chunk[4 + feature_dim];
            if raw.fract() != 0.0 || raw < 0.0 || raw >= u32::MAX as f64 {
                return Err(DataError::NonIntegerLabel { value: raw });
            }
            l.push(raw as u32);
        }
    }
    let seq = PointCloudSequence::new(positions, timestamps, features, feature_dim, labels, frame_count)?;
    Ok((seq, task))
}

fn truncation(frame_count: u32, points_per_frame: usize, actual: usize) -> DataError {
    DataError::Truncated {
        expected_points: frame_count as usize * points_per_frame,
        actual_values: actual,
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| DataError::BadMagic)?;
    Ok(u32::from_le_bytes(b))
}

/// Read every `.seq` file in a directory, sorted by file name.
pub fn read_dataset(dir: &Path) -> Result<Vec<(PointCloudSequence, Task)>, DataError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "seq"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    paths.iter().map(|p| read_sequence(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("asta3d_seq_test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample() -> PointCloudSequence {
        PointCloudSequence::new(
            vec![[0.1, 0.2, 0.3], [1.0, -2.0, 3.5], [0.0, 0.0, 1e-12], [9.0, 8.0, 7.0]],
            vec![0, 0, 1, 1],
            vec![0.5, 0.25, -0.75, 1.5, 2.5, -3.5, 0.0, 1e100],
            2,
            Some(vec![3, 1, 0, 2]),
            2,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let path = tmp("rt.seq");
        let seq = sample();
        write_sequence(&seq, Task::Segmentation, &path).unwrap();
        let (back, task) = read_sequence(&path).unwrap();
        assert_eq!(task, Task::Segmentation);
        assert_eq!(seq, back);
        // and the files themselves match byte for byte
        let rewritten = tmp("rt2.seq");
        write_sequence(&back, Task::Segmentation, &rewritten).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&rewritten).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let path = tmp("magic.seq");
        write_sequence(&sample(), Task::Classification, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_sequence(&path), Err(DataError::BadMagic)));
    }

    #[test]
    fn truncated_body_is_rejected() {
        let path = tmp("trunc.seq");
        write_sequence(&sample(), Task::Classification, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match read_sequence(&path) {
            Err(DataError::Truncated { expected_points: 4, .. }) => {}
            other => panic!("expected truncation error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_integer_timestamp_is_rejected() {
        let path = tmp("ts.seq");
        write_sequence(&sample(), Task::Classification, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // timestamp of the first point sits after the 26-byte header and
        // three coordinates
        let offset = 26 + 3 * 8;
        bytes[offset..offset + 8].copy_from_slice(&0.5f64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_sequence(&path),
            Err(DataError::NonIntegerTimestamp { value }) if value == 0.5
        ));
    }

    #[test]
    fn dataset_reader_sorts_by_name() {
        let dir = std::env::temp_dir().join("asta3d_seq_dataset");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let a = sample();
        write_sequence(&a, Task::Classification, &dir.join("b.seq")).unwrap();
        write_sequence(&a, Task::Classification, &dir.join("a.seq")).unwrap();
        let all = read_dataset(&dir).unwrap();
        assert_eq!(all.len(), 2);
        let empty = std::env::temp_dir().join("asta3d_seq_empty");
        let _ = std::fs::remove_dir_all(&empty);
        std::fs::create_dir_all(&empty).unwrap();
        assert!(matches!(read_dataset(&empty), Err(DataError::EmptyDataset)));
    }
}

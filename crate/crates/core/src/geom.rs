//! Point-set selection primitives: farthest point sampling for core-point
//! selection and radius-bounded neighbor queries over multi-frame clouds.
//!
//! Neighbor selection is index-ordered (ball-query convention): candidates
//! are scanned in ascending source index and the first K inside the radius
//! fill the group. The grid-accelerated path must reproduce the naive scan
//! exactly, set and order.

use std::collections::HashMap;
use std::fmt;

#[derive(Debug)]
pub enum GeomError {
    SampleCountExceedsPoints { requested: usize, available: usize },
    SeedOutOfRange { seed: usize, available: usize },
    TimestampOutOfRange { timestamp: u32, frame_count: u32 },
    FeatureLengthMismatch { expected: usize, actual: usize },
    LabelLengthMismatch { expected: usize, actual: usize },
    UnbalancedFrame { frame: u32, count: usize, expected: usize },
    EmptySequence,
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::SampleCountExceedsPoints { requested, available } => {
                write!(f, "cannot sample {} points from {}", requested, available)
            }
            GeomError::SeedOutOfRange { seed, available } => {
                write!(f, "seed index {} out of range for {} points", seed, available)
            }
            GeomError::TimestampOutOfRange { timestamp, frame_count } => {
                write!(f, "timestamp {} outside frame count {}", timestamp, frame_count)
            }
            GeomError::FeatureLengthMismatch { expected, actual } => {
                write!(f, "feature buffer length {} does not match {}", actual, expected)
            }
            GeomError::LabelLengthMismatch { expected, actual } => {
                write!(f, "label count {} does not match point count {}", actual, expected)
            }
            GeomError::UnbalancedFrame { frame, count, expected } => {
                write!(f, "frame {} holds {} points, expected {}", frame, count, expected)
            }
            GeomError::EmptySequence => write!(f, "sequence holds no points"),
        }
    }
}

impl std::error::Error for GeomError {}

/// Positions and integer frame timestamps, the geometric part of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub positions: Vec<[f64; 3]>,
    pub timestamps: Vec<u32>,
    pub frame_count: u32,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A multi-frame point cloud as ingested from disk or a generator:
/// per-point position, frame timestamp, feature vector, optional label.
/// Frames are balanced (`points_per_frame` each).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSequence {
    positions: Vec<[f64; 3]>,
    timestamps: Vec<u32>,
    features: Vec<f64>,
    feature_dim: usize,
    labels: Option<Vec<u32>>,
    frame_count: u32,
    points_per_frame: usize,
}

impl PointCloudSequence {
    pub fn new(
        positions: Vec<[f64; 3]>,
        timestamps: Vec<u32>,
        features: Vec<f64>,
        feature_dim: usize,
        labels: Option<Vec<u32>>,
        frame_count: u32,
    ) -> Result<Self, GeomError> {
        let n = positions.len();
        if n == 0 || frame_count == 0 {
            return Err(GeomError::EmptySequence);
        }
        if features.len() != n * feature_dim {
            return Err(GeomError::FeatureLengthMismatch {
                expected: n * feature_dim,
                actual: features.len(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(GeomError::LabelLengthMismatch {
                    expected: n,
                    actual: l.len(),
                });
            }
        }
        let mut per_frame = vec![0usize; frame_count as usize];
        for (&t, _) in timestamps.iter().zip(&positions) {
            if t >= frame_count {
                return Err(GeomError::TimestampOutOfRange { timestamp: t, frame_count });
            }
            per_frame[t as usize] += 1;
        }
        let expected = n / frame_count as usize;
        for (frame, &count) in per_frame.iter().enumerate() {
            if count != expected {
                return Err(GeomError::UnbalancedFrame {
                    frame: frame as u32,
                    count,
                    expected,
                });
            }
        }
        Ok(PointCloudSequence {
            positions,
            timestamps,
            features,
            feature_dim,
            labels,
            frame_count,
            points_per_frame: expected,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn frame_count(&self) -> u32 {
        self.frame_count
    }

    pub fn points_per_frame(&self) -> usize {
        self.points_per_frame
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn timestamps(&self) -> &[u32] {
        &self.timestamps
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, point: usize) -> &[f64] {
        &self.features[point * self.feature_dim..(point + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn point_set(&self) -> PointSet {
        PointSet {
            positions: self.positions.clone(),
            timestamps: self.timestamps.clone(),
            frame_count: self.frame_count,
        }
    }

    /// New sequence restricted to `indices` (keeps the selection order).
    /// Used by per-frame downsampling, which preserves frame balance.
    pub fn select(&self, indices: &[usize]) -> Result<Self, GeomError> {
        let positions: Vec<[f64; 3]> = indices.iter().map(|&i| self.positions[i]).collect();
        let timestamps: Vec<u32> = indices.iter().map(|&i| self.timestamps[i]).collect();
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.feature(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        PointCloudSequence::new(
            positions,
            timestamps,
            features,
            self.feature_dim,
            labels,
            self.frame_count,
        )
    }
}

/// Core points chosen by farthest point sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreSet {
    pub indices: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
    pub timestamps: Vec<u32>,
}

impl CoreSet {
    pub fn from_indices(set: &PointSet, indices: Vec<usize>) -> Self {
        let positions = indices.iter().map(|&i| set.positions[i]).collect();
        let timestamps = indices.iter().map(|&i| set.timestamps[i]).collect();
        CoreSet { indices, positions, timestamps }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling over 3D coordinates (timestamps are
/// ignored for distance). The first pick is `seed_index`; each further
/// pick maximizes the minimum distance to the selected set, ties resolved
/// to the lowest index.
pub fn farthest_point_sample(
    positions: &[[f64; 3]],
    n: usize,
    seed_index: usize,
) -> Result<Vec<usize>, GeomError> {
    if n > positions.len() {
        return Err(GeomError::SampleCountExceedsPoints {
            requested: n,
            available: positions.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= positions.len() {
        return Err(GeomError::SeedOutOfRange {
            seed: seed_index,
            available: positions.len(),
        });
    }
    let len = positions.len();
    let mut selected = Vec::with_capacity(n);
    let mut taken = vec![false; len];
    let mut min_d2 = vec![f64::INFINITY; len];
    let mut current = seed_index;
    selected.push(current);
    taken[current] = true;
    for _ in 1..n {
        for i in 0..len {
            let d = dist2(positions[i], positions[current]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for i in 0..len {
            if !taken[i] && min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
        taken[current] = true;
        selected.push(current);
    }
    Ok(selected)
}

/// Pooled FPS over all frames of a set.
pub fn sample_cores(set: &PointSet, n: usize, seed_index: usize) -> Result<CoreSet, GeomError> {
    let indices = farthest_point_sample(&set.positions, n, seed_index)?;
    Ok(CoreSet::from_indices(set, indices))
}

/// FPS applied independently inside each frame (dataset downsampling).
/// Returns global indices grouped frame by frame.
pub fn farthest_point_sample_per_frame(
    set: &PointSet,
    n_per_frame: usize,
) -> Result<Vec<usize>, GeomError> {
    let mut out = Vec::with_capacity(n_per_frame * set.frame_count as usize);
    for frame in 0..set.frame_count {
        let frame_indices: Vec<usize> = (0..set.len())
            .filter(|&i| set.timestamps[i] == frame)
            .collect();
        let frame_positions: Vec<[f64; 3]> =
            frame_indices.iter().map(|&i| set.positions[i]).collect();
        let local = farthest_point_sample(&frame_positions, n_per_frame, 0)?;
        out.extend(local.into_iter().map(|l| frame_indices[l]));
    }
    Ok(out)
}

pub const NEIGHBOR_SLOTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSlot {
    pub index: usize,
    pub position: [f64; 3],
    pub timestamp: u32,
}

/// K queried neighbors of one anchor. When fewer than K points qualify the
/// remaining slots duplicate the first valid slot; when none qualify the
/// group is empty and flags the zero-feature path downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGroup {
    pub slots: Vec<NeighborSlot>,
    pub valid_count: usize,
}

impl NeighborGroup {
    pub fn is_empty(&self) -> bool {
        self.valid_count == 0
    }
}

/// Naive O(N) reference query: scan candidates in ascending source index,
/// keep the first `k` with `dist < radii[|t - center_t|]` (strict).
pub fn radius_query(
    set: &PointSet,
    center: [f64; 3],
    center_t: u32,
    radii: &[f64],
    k: usize,
) -> NeighborGroup {
    let mut slots: Vec<NeighborSlot> = Vec::with_capacity(k);
    for i in 0..set.len() {
        let dt = set.timestamps[i].abs_diff(center_t) as usize;
        let r = radii[dt];
        if dist2(set.positions[i], center) < r * r {
            slots.push(NeighborSlot {
                index: i,
                position: set.positions[i],
                timestamp: set.timestamps[i],
            });
            if slots.len() == k {
                break;
            }
        }
    }
    fill_group(slots, k)
}

fn fill_group(mut slots: Vec<NeighborSlot>, k: usize) -> NeighborGroup {
    let valid_count = slots.len();
    if valid_count > 0 {
        let first = slots[0].clone();
        while slots.len() < k {
            slots.push(first.clone());
        }
    }
    NeighborGroup { slots, valid_count }
}

/// Uniform spatial hash over cubic cells. Build once, query read-only.
pub struct GridIndex {
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    cell_size: f64,
}

impl GridIndex {
    pub fn build(positions: &[[f64; 3]], cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, &p) in positions.iter().enumerate() {
            cells.entry(Self::key(p, cell_size)).or_default().push(i);
        }
        GridIndex { cells, cell_size }
    }

    fn key(p: [f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Indices of every point in cells overlapping the ball, sorted
    /// ascending. A superset of the true in-radius set.
    pub fn candidates(&self, center: [f64; 3], radius: f64) -> Vec<usize> {
        let lo = Self::key([center[0] - radius, center[1] - radius, center[2] - radius], self.cell_size);
        let hi = Self::key([center[0] + radius, center[1] + radius, center[2] + radius], self.cell_size);
        let mut out = Vec::new();
        for cx in lo.0..=hi.0 {
            for cy in lo.1..=hi.1 {
                for cz in lo.2..=hi.2 {
                    if let Some(indices) = self.cells.get(&(cx, cy, cz)) {
                        out.extend_from_slice(indices);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Grid-accelerated query; identical results to [`radius_query`],
    /// including selection order.
    pub fn radius_query(
        &self,
        set: &PointSet,
        center: [f64; 3],
        center_t: u32,
        radii: &[f64],
        k: usize,
    ) -> NeighborGroup {
        let r_max = radii
            .iter()
            .take(set.frame_count as usize)
            .cloned()
            .fold(0.0f64, f64::max);
        let mut slots: Vec<NeighborSlot> = Vec::with_capacity(k);
        for i in self.candidates(center, r_max) {
            let dt = set.timestamps[i].abs_diff(center_t) as usize;
            let r = radii[dt];
            if dist2(set.positions[i], center) < r * r {
                slots.push(NeighborSlot {
                    index: i,
                    position: set.positions[i],
                    timestamp: set.timestamps[i],
                });
                if slots.len() == k {
                    break;
                }
            }
        }
        fill_group(slots, k)
    }
}

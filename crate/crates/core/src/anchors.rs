//! Virtual anchor construction and the time-scaled query radius.
//!
//! Four anchors sit at the vertices of a regular tetrahedron of scale
//! `delta_x` around each core point, sharing the core's timestamp. The
//! query radius grows linearly with the frame interval across a band of
//! initial radii, doubles per sampling level, and never drops below the
//! anchor offset.

use std::fmt;

use crate::geom::CoreSet;

pub const ANCHOR_COUNT: usize = 4;

/// Rows are unit vectors from the core point to each tetrahedron vertex:
/// pairwise cosines are -1/3 and the rows sum to zero.
pub fn tetrahedron_basis() -> [[f64; 3]; ANCHOR_COUNT] {
    let s2 = 2.0f64.sqrt();
    let s6 = 6.0f64.sqrt();
    [
        [s2 / 3.0, -s6 / 3.0, -1.0 / 3.0],
        [s2 / 3.0, s6 / 3.0, -1.0 / 3.0],
        [-2.0 * s2 / 3.0, 0.0, -1.0 / 3.0],
        [0.0, 0.0, 1.0],
    ]
}

#[derive(Debug)]
pub enum AnchorError {
    NonPositiveScale { delta_x: f64 },
    FrameIntervalOutOfRange { delta_t: u32, frame_count: u32 },
}

impl fmt::Display for AnchorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnchorError::NonPositiveScale { delta_x } => {
                write!(f, "anchor scale must be positive, got {}", delta_x)
            }
            AnchorError::FrameIntervalOutOfRange { delta_t, frame_count } => {
                write!(f, "frame interval {} outside sequence of {} frames", delta_t, frame_count)
            }
        }
    }
}

impl std::error::Error for AnchorError {}

/// The 4 virtual anchors of every core point, stored core-major:
/// anchor `j` of core `i` lives at `positions[i * 4 + j]`.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub positions: Vec<[f64; 3]>,
    pub timestamps: Vec<u32>,
    pub delta_x: f64,
    pub core_count: usize,
}

impl AnchorSet {
    pub fn anchor(&self, core: usize, j: usize) -> ([f64; 3], u32) {
        let idx = core * ANCHOR_COUNT + j;
        (self.positions[idx], self.timestamps[idx])
    }
}

/// Place anchors at `core + delta_x * basis_row`, timestamps copied from
/// the core.
pub fn make_anchors(cores: &CoreSet, delta_x: f64) -> Result<AnchorSet, AnchorError> {
    if !(delta_x > 0.0) {
        return Err(AnchorError::NonPositiveScale { delta_x });
    }
    let basis = tetrahedron_basis();
    let mut positions = Vec::with_capacity(cores.len() * ANCHOR_COUNT);
    let mut timestamps = Vec::with_capacity(cores.len() * ANCHOR_COUNT);
    for (core, &t) in cores.positions.iter().zip(&cores.timestamps) {
        for row in &basis {
            positions.push([
                core[0] + delta_x * row[0],
                core[1] + delta_x * row[1],
                core[2] + delta_x * row[2],
            ]);
            timestamps.push(t);
        }
    }
    Ok(AnchorSet {
        positions,
        timestamps,
        delta_x,
        core_count: cores.len(),
    })
}

/// Query-radius schedule for one sampling level. Initial radii are spread
/// evenly across `[adjustment * band.0, adjustment * band.1]` by frame
/// interval, doubled once per level, and clamped below by `clamp_floor`
/// (the anchor offset).
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusSchedule {
    pub adjustment: f64,
    pub band: (f64, f64),
    pub level: u32,
    pub frame_count: u32,
    pub clamp_floor: f64,
}

impl RadiusSchedule {
    pub fn new(adjustment: f64, band: (f64, f64), level: u32, frame_count: u32, clamp_floor: f64) -> Self {
        RadiusSchedule { adjustment, band, level, frame_count, clamp_floor }
    }

    /// Radius for a frame interval `delta_t < frame_count`.
    pub fn radius_for(&self, delta_t: u32) -> Result<f64, AnchorError> {
        if delta_t >= self.frame_count {
            return Err(AnchorError::FrameIntervalOutOfRange {
                delta_t,
                frame_count: self.frame_count,
            });
        }
        let lo = self.adjustment * self.band.0;
        let hi = self.adjustment * self.band.1;
        // endpoint-exact linear blend; a single frame pins t at the low end
        let t = if self.frame_count <= 1 {
            0.0
        } else {
            delta_t as f64 / (self.frame_count - 1) as f64
        };
        let base = lo * (1.0 - t) + hi * t;
        let scaled = (1u64 << self.level) as f64 * base;
        Ok(scaled.max(self.clamp_floor))
    }

    /// All radii of this schedule, indexed by frame interval.
    pub fn table(&self) -> Vec<f64> {
        (0..self.frame_count)
            .map(|dt| self.radius_for(dt).expect("interval below frame count"))
            .collect()
    }

    /// Default anchor scale: half the level's zero-interval radius, so the
    /// clamp is non-binding out of the box.
    pub fn default_delta_x(adjustment: f64, band_lo: f64, level: u32) -> f64 {
        (1u64 << level) as f64 * adjustment * band_lo / 2.0
    }
}

//! Synthetic desk-scale datasets: rigid/scaling motions for classification
//! and a moving blob over a static background for segmentation. Generation
//! is a pure function of the spec, seed included.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geom::PointCloudSequence;
use crate::seqfile::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionClass {
    TranslateUp,
    TranslateDown,
    UniformExpand,
    RotateAboutZ,
}

pub const MOTION_CLASSES: [MotionClass; 4] = [
    MotionClass::TranslateUp,
    MotionClass::TranslateDown,
    MotionClass::UniformExpand,
    MotionClass::RotateAboutZ,
];

#[derive(Debug, Clone)]
pub struct MotionSpec {
    pub classes: usize,
    pub sequences_per_class: usize,
    pub frames: u32,
    pub points_per_frame: usize,
    /// Per-frame motion magnitude: translation step in scene units,
    /// expansion rate, rotation angle in radians.
    pub step: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            classes: 4,
            sequences_per_class: 50,
            frames: 8,
            points_per_frame: 64,
            step: 0.12,
            noise_sigma: 0.01,
            seed: 7,
        }
    }
}

/// Labeled motion sequences, class-major order. The base shape is a random
/// unit-cube point set re-centered on its centroid, so the frame-t centroid
/// of a noise-free translation sits exactly at t * step.
pub fn generate_motion_classification(spec: &MotionSpec) -> Result<Vec<PointCloudSequence>, DataError> {
    if spec.classes > MOTION_CLASSES.len() || spec.classes == 0 {
        return Err(DataError::UnsupportedClassCount {
            requested: spec.classes,
            supported: MOTION_CLASSES.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(spec.classes * spec.sequences_per_class);
    for class in 0..spec.classes {
        let motion = MOTION_CLASSES[class];
        for _ in 0..spec.sequences_per_class {
            let mut base: Vec<[f64; 3]> = (0..spec.points_per_frame)
                .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
                .collect();
            let mut centroid = [0.0f64; 3];
            for p in &base {
                for a in 0..3 {
                    centroid[a] += p[a];
                }
            }
            for a in 0..3 {
                centroid[a] /= spec.points_per_frame as f64;
            }
            for p in &mut base {
                for a in 0..3 {
                    p[a] -= centroid[a];
                }
            }

            let total = spec.frames as usize * spec.points_per_frame;
            let mut positions = Vec::with_capacity(total);
            let mut timestamps = Vec::with_capacity(total);
            for t in 0..spec.frames {
                let magnitude = t as f64 * spec.step;
                for p in &base {
                    let mut q = apply_motion(motion, *p, magnitude);
                    if spec.noise_sigma > 0.0 {
                        for a in 0..3 {
                            q[a] += spec.noise_sigma * normal.sample(&mut rng);
                        }
                    }
                    positions.push(q);
                    timestamps.push(t);
                }
            }
            let labels = vec![class as u32; total];
            out.push(PointCloudSequence::new(
                positions,
                timestamps,
                vec![],
                0,
                Some(labels),
                spec.frames,
            )?);
        }
    }
    Ok(out)
}

fn apply_motion(motion: MotionClass, p: [f64; 3], magnitude: f64) -> [f64; 3] {
    match motion {
        MotionClass::TranslateUp => [p[0], p[1], p[2] + magnitude],
        MotionClass::TranslateDown => [p[0], p[1], p[2] - magnitude],
        MotionClass::UniformExpand => {
            let s = 1.0 + magnitude;
            [p[0] * s, p[1] * s, p[2] * s]
        }
        MotionClass::RotateAboutZ => {
            let (sin, cos) = magnitude.sin_cos();
            [p[0] * cos - p[1] * sin, p[0] * sin + p[1] * cos, p[2]]
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlobSpec {
    pub sequences: usize,
    pub frames: u32,
    pub background_points: usize,
    pub blob_points: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Fixed blob trajectory; random inside the scene when unset.
    pub blob_start: Option<[f64; 3]>,
    pub blob_velocity: Option<[f64; 3]>,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            sequences: 40,
            frames: 3,
            background_points: 192,
            blob_points: 64,
            noise_sigma: 0.01,
            seed: 11,
            blob_start: None,
            blob_velocity: None,
        }
    }
}

pub const BACKGROUND_COLOR: [f64; 3] = [0.2, 0.3, 0.4];
pub const BLOB_COLOR: [f64; 3] = [0.9, 0.6, 0.1];
const BLOB_SIGMA: f64 = 0.08;

/// Two-class scenes: a static unit-cube background (label 0) and a rigid
/// Gaussian blob translating across frames (label 1). RGB color is
/// class-correlated with additive noise; points are background-first
/// within each frame.
pub fn generate_blob_segmentation(spec: &BlobSpec) -> Result<Vec<PointCloudSequence>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let per_frame = spec.background_points + spec.blob_points;
    let mut out = Vec::with_capacity(spec.sequences);
    for _ in 0..spec.sequences {
        let background: Vec<[f64; 3]> = (0..spec.background_points)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        let blob_offsets: Vec<[f64; 3]> = (0..spec.blob_points)
            .map(|_| {
                [
                    BLOB_SIGMA * normal.sample(&mut rng),
                    BLOB_SIGMA * normal.sample(&mut rng),
                    BLOB_SIGMA * normal.sample(&mut rng),
                ]
            })
            .collect();
        let start = spec.blob_start.unwrap_or([
            rng.gen_range(0.1..0.4),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ]);
        let velocity = spec.blob_velocity.unwrap_or([
            rng.gen_range(0.1..0.25),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ]);

        let total = spec.frames as usize * per_frame;
        let mut positions = Vec::with_capacity(total);
        let mut timestamps = Vec::with_capacity(total);
        let mut features = Vec::with_capacity(total * 3);
        let mut labels = Vec::with_capacity(total);
        for t in 0..spec.frames {
            for p in &background {
                positions.push(noisy(*p, spec.noise_sigma, &normal, &mut rng));
                timestamps.push(t);
                push_color(&mut features, BACKGROUND_COLOR, spec.noise_sigma, &normal, &mut rng);
                labels.push(0);
            }
            let center = [
                start[0] + t as f64 * velocity[0],
                start[1] + t as f64 * velocity[1],
                start[2] + t as f64 * velocity[2],
            ];
            for o in &blob_offsets {
                let p = [center[0] + o[0], center[1] + o[1], center[2] + o[2]];
                positions.push(noisy(p, spec.noise_sigma, &normal, &mut rng));
                timestamps.push(t);
                push_color(&mut features, BLOB_COLOR, spec.noise_sigma, &normal, &mut rng);
                labels.push(1);
            }
        }
        out.push(PointCloudSequence::new(
            positions,
            timestamps,
            features,
            3,
            Some(labels),
            spec.frames,
        )?);
    }
    Ok(out)
}

fn noisy(p: [f64; 3], sigma: f64, normal: &Normal<f64>, rng: &mut ChaCha8Rng) -> [f64; 3] {
    if sigma == 0.0 {
        return p;
    }
    [
        p[0] + sigma * normal.sample(rng),
        p[1] + sigma * normal.sample(rng),
        p[2] + sigma * normal.sample(rng),
    ]
}

fn push_color(features: &mut Vec<f64>, base: [f64; 3], sigma: f64, normal: &Normal<f64>, rng: &mut ChaCha8Rng) {
    for &c in &base {
        let v = if sigma == 0.0 { c } else { c + sigma * normal.sample(rng) };
        features.push(v.clamp(0.0, 1.0));
    }
}

/// Seeded shuffle split into batches; the final partial batch is kept.
pub fn make_batches(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    if len == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_free_motion(classes: usize) -> MotionSpec {
        MotionSpec {
            classes,
            sequences_per_class: 2,
            frames: 4,
            points_per_frame: 16,
            step: 0.1,
            noise_sigma: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn translate_up_centroid_tracks_the_step() {
        let seqs = generate_motion_classification(&noise_free_motion(1)).unwrap();
        for seq in &seqs {
            for t in 0..seq.frame_count() {
                let mut z = 0.0;
                let mut count = 0;
                for i in 0..seq.len() {
                    if seq.timestamps()[i] == t {
                        z += seq.positions()[i][2];
                        count += 1;
                    }
                }
                let centroid_z = z / count as f64;
                assert!((centroid_z - t as f64 * 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let spec = MotionSpec { classes: 4, ..noise_free_motion(4) };
        let seqs = generate_motion_classification(&spec).unwrap();
        let rotated = &seqs[3 * spec.sequences_per_class];
        let per_frame = spec.points_per_frame;
        let frame = |t: usize| &rotated.positions()[t * per_frame..(t + 1) * per_frame];
        let d = |a: [f64; 3], b: [f64; 3]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        for t in 1..spec.frames as usize {
            for i in 0..6 {
                for j in (i + 1)..6 {
                    let base = d(frame(0)[i], frame(0)[j]);
                    let now = d(frame(t)[i], frame(t)[j]);
                    assert!((base - now).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_given_the_seed() {
        let spec = MotionSpec { noise_sigma: 0.02, ..noise_free_motion(4) };
        let a = generate_motion_classification(&spec).unwrap();
        let b = generate_motion_classification(&spec).unwrap();
        assert_eq!(a, b);
        let blob = BlobSpec { sequences: 3, ..BlobSpec::default() };
        assert_eq!(
            generate_blob_segmentation(&blob).unwrap(),
            generate_blob_segmentation(&blob).unwrap()
        );
    }

    #[test]
    fn class_count_above_supported_is_rejected() {
        assert!(matches!(
            generate_motion_classification(&noise_free_motion(5)),
            Err(DataError::UnsupportedClassCount { requested: 5, supported: 4 })
        ));
    }

    #[test]
    fn distant_blob_is_separable_by_position() {
        let spec = BlobSpec {
            sequences: 2,
            noise_sigma: 0.0,
            blob_start: Some([3.0, 3.0, 3.0]),
            blob_velocity: Some([0.3, 0.0, 0.0]),
            ..BlobSpec::default()
        };
        for seq in generate_blob_segmentation(&spec).unwrap() {
            let labels = seq.labels().unwrap();
            for i in 0..seq.len() {
                let outside = seq.positions()[i][0] > 2.0;
                assert_eq!(labels[i] == 1, outside);
            }
        }
    }

    #[test]
    fn zero_blob_points_gives_all_background_labels() {
        let spec = BlobSpec { sequences: 1, blob_points: 0, ..BlobSpec::default() };
        let seqs = generate_blob_segmentation(&spec).unwrap();
        assert!(seqs[0].labels().unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn batches_cover_everything_with_partial_tail() {
        let batches = make_batches(10, 3, 1).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_is_seeded() {
        assert_eq!(make_batches(100, 7, 42).unwrap(), make_batches(100, 7, 42).unwrap());
        assert_ne!(make_batches(100, 7, 42).unwrap(), make_batches(100, 7, 43).unwrap());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(make_batches(0, 4, 0), Err(DataError::EmptyDataset)));
    }
}

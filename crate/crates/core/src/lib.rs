//! Anchor-based spatio-temporal attention 3D convolution for dynamic point
//! cloud sequences.
//!
//! The crate bundles a minimal f64 reverse-mode autodiff core, point-set
//! sampling primitives, the anchor convolution operator, classification and
//! segmentation networks built from it, synthetic datasets, and a training
//! loop. Everything is deterministic given the configured seeds.

pub mod anchors;
pub mod conv;
pub mod geom;
pub mod metrics;
pub mod network;
pub mod seqfile;
pub mod synth;
pub mod tensor;
pub mod train;

pub use geom::{CoreSet, NeighborGroup, PointCloudSequence, PointSet};
pub use tensor::{Graph, NodeId, ParamSet, Tensor};

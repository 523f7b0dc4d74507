//! The anchor convolution operator.
//!
//! Feature extraction at a core point runs in two steps: neighborhood
//! points are embedded into the 4 virtual anchors by attention-weighted
//! aggregation, then a 1x4 convolution over the anchors produces the core
//! feature. Anchors with no in-radius neighbors contribute exact zeros and
//! no parameter gradient.

use std::fmt;

use rand::Rng;

use crate::anchors::{make_anchors, AnchorError, AnchorSet, RadiusSchedule, ANCHOR_COUNT};
use crate::geom::{CoreSet, GridIndex, NeighborGroup, PointSet, NEIGHBOR_SLOTS};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::nn::{Mlp, ParamId, ParamSet};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug)]
pub enum ConvError {
    Tensor(TensorError),
    Anchor(AnchorError),
    FeatureDimMismatch { expected: usize, actual: usize },
    GroupSizeMismatch { expected: usize, actual: usize },
}

impl fmt::Display for ConvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvError::Tensor(e) => write!(f, "{}", e),
            ConvError::Anchor(e) => write!(f, "{}", e),
            ConvError::FeatureDimMismatch { expected, actual } => {
                write!(f, "layer expects {} input feature channels, got {}", expected, actual)
            }
            ConvError::GroupSizeMismatch { expected, actual } => {
                write!(f, "neighbor group holds {} slots, layer expects {}", actual, expected)
            }
        }
    }
}

impl std::error::Error for ConvError {}

impl From<TensorError> for ConvError {
    fn from(e: TensorError) -> Self {
        ConvError::Tensor(e)
    }
}

impl From<AnchorError> for ConvError {
    fn from(e: AnchorError) -> Self {
        ConvError::Anchor(e)
    }
}

/// Radius schedule parameters of one layer; the frame count is supplied by
/// the sequence at planning time and the clamp floor is the anchor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusSpec {
    pub adjustment: f64,
    pub band: (f64, f64),
    pub level: u32,
}

impl RadiusSpec {
    pub fn schedule(&self, frame_count: u32, clamp_floor: f64) -> RadiusSchedule {
        RadiusSchedule::new(self.adjustment, self.band, self.level, frame_count, clamp_floor)
    }
}

#[derive(Debug, Clone)]
pub struct AstaConvConfig {
    /// Input feature channels c.
    pub in_features: usize,
    /// Embedding width d of the anchor features.
    pub embed_dim: usize,
    /// Output channels c' at the core points.
    pub out_features: usize,
    /// Hidden widths of the encoding MLP (input is 4+c, output d).
    pub encode_hidden: Vec<usize>,
    /// Hidden widths of the attention MLP (input is 4+c+d, output d).
    pub attend_hidden: Vec<usize>,
    /// Neighbors queried per anchor.
    pub neighbors: usize,
    /// Tetrahedron scale; also the radius clamp floor.
    pub delta_x: f64,
    pub radius: RadiusSpec,
    /// Softmax attention when true, per-channel max pooling when false.
    pub attention: bool,
    /// Batch norm inside both MLPs.
    pub batch_norm: bool,
    /// Feed |dt| / (T-1) instead of the raw frame interval into the
    /// relative encoding.
    pub normalize_dt: bool,
}

impl AstaConvConfig {
    /// One hidden layer of width d in both MLPs.
    pub fn new(in_features: usize, embed_dim: usize, out_features: usize, delta_x: f64, radius: RadiusSpec) -> Self {
        AstaConvConfig {
            in_features,
            embed_dim,
            out_features,
            encode_hidden: vec![embed_dim],
            attend_hidden: vec![embed_dim],
            neighbors: NEIGHBOR_SLOTS,
            delta_x,
            radius,
            attention: true,
            batch_norm: true,
            normalize_dt: false,
        }
    }

    fn phi_dim(&self) -> usize {
        4 + self.in_features
    }
}

/// Geometry of one layer application: cores, their anchors, and the
/// queried neighbor groups (anchor-major, `core * 4 + j`). Depends only on
/// point positions and timestamps, so it can be computed once per sequence
/// and reused across epochs.
pub struct ConvGeometry {
    pub cores: CoreSet,
    pub anchors: AnchorSet,
    pub groups: Vec<NeighborGroup>,
    pub frame_count: u32,
    pub input_len: usize,
}

pub struct AstaConvLayer {
    pub config: AstaConvConfig,
    encode: Mlp,
    attend: Mlp,
    conv_weight: ParamId,
    conv_bias: ParamId,
}

/// Features produced at the core points, value level.
pub struct ConvOutput {
    pub points: PointSet,
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl AstaConvLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        config: AstaConvConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let mut encode_dims = vec![config.phi_dim()];
        encode_dims.extend_from_slice(&config.encode_hidden);
        encode_dims.push(config.embed_dim);
        let encode = Mlp::new(params, &format!("{name}.encode"), &encode_dims, config.batch_norm, true, rng)?;

        let mut attend_dims = vec![config.phi_dim() + config.embed_dim];
        attend_dims.extend_from_slice(&config.attend_hidden);
        attend_dims.push(config.embed_dim);
        let attend = Mlp::new(params, &format!("{name}.attend"), &attend_dims, config.batch_norm, false, rng)?;

        let kd = ANCHOR_COUNT * config.embed_dim;
        let bound = (6.0 / (kd + config.out_features) as f64).sqrt();
        let weight_data: Vec<f64> = (0..kd * config.out_features)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let conv_weight = params.register(
            &format!("{name}.conv.weight"),
            vec![kd, config.out_features],
            weight_data,
            true,
        )?;
        let conv_bias = params.register(
            &format!("{name}.conv.bias"),
            vec![config.out_features],
            vec![0.0; config.out_features],
            true,
        )?;
        Ok(AstaConvLayer { config, encode, attend, conv_weight, conv_bias })
    }

    /// Build anchors and query neighbor groups for `cores` over `input`.
    pub fn plan(&self, input: &PointSet, cores: &CoreSet) -> Result<ConvGeometry, ConvError> {
        let anchors = make_anchors(cores, self.config.delta_x)?;
        let schedule = self.config.radius.schedule(input.frame_count, self.config.delta_x);
        let radii = schedule.table();
        let r_max = radii.iter().cloned().fold(0.0f64, f64::max);
        let grid = GridIndex::build(&input.positions, r_max);
        let mut groups = Vec::with_capacity(anchors.positions.len());
        for (&pos, &t) in anchors.positions.iter().zip(&anchors.timestamps) {
            groups.push(grid.radius_query(input, pos, t, &radii, self.config.neighbors));
        }
        Ok(ConvGeometry {
            cores: cores.clone(),
            anchors,
            groups,
            frame_count: input.frame_count,
            input_len: input.len(),
        })
    }

    /// Spatio-temporal attentive embedding: encode each neighbor relative
    /// to its anchor, aggregate the K encodings per anchor with
    /// channel-wise softmax attention (or per-channel max pooling when
    /// attention is disabled). Returns `[cores * 4, d]`; rows of empty
    /// anchors are exactly zero.
    pub fn attentive_embed(
        &self,
        g: &mut Graph,
        params: &mut ParamSet,
        geom: &ConvGeometry,
        features: NodeId,
        training: bool,
    ) -> Result<NodeId, ConvError> {
        Ok(self.embed_with_weights(g, params, geom, features, training)?.0)
    }

    /// Same as [`Self::attentive_embed`], also exposing the attention
    /// weights `[valid groups, K, d]`.
    pub fn embed_with_weights(
        &self,
        g: &mut Graph,
        params: &mut ParamSet,
        geom: &ConvGeometry,
        features: NodeId,
        training: bool,
    ) -> Result<(NodeId, Option<NodeId>), ConvError> {
        let c = self.config.in_features;
        let d = self.config.embed_dim;
        let k = self.config.neighbors;
        let fshape = g.shape(features);
        if fshape.len() != 2 || fshape[1] != c || fshape[0] != geom.input_len {
            return Err(ConvError::FeatureDimMismatch {
                expected: c,
                actual: fshape.get(1).copied().unwrap_or(0),
            });
        }

        let total_groups = geom.groups.len();
        let valid: Vec<usize> = (0..total_groups).filter(|&i| !geom.groups[i].is_empty()).collect();
        if valid.is_empty() {
            let zeros = g.constant(vec![total_groups, d], vec![0.0; total_groups * d])?;
            return Ok((zeros, None));
        }

        let dt_scale = if self.config.normalize_dt {
            1.0 / geom.frame_count.saturating_sub(1).max(1) as f64
        } else {
            1.0
        };

        // relative encoding: (dx, dy, dz, |dt|) per slot, features gathered
        let rows = valid.len() * k;
        let mut phi_geo = Vec::with_capacity(rows * 4);
        let mut gather_idx = Vec::with_capacity(rows);
        for &gi in &valid {
            let group = &geom.groups[gi];
            if group.slots.len() != k {
                return Err(ConvError::GroupSizeMismatch {
                    expected: k,
                    actual: group.slots.len(),
                });
            }
            let (apos, at) = (geom.anchors.positions[gi], geom.anchors.timestamps[gi]);
            for slot in &group.slots {
                phi_geo.push(slot.position[0] - apos[0]);
                phi_geo.push(slot.position[1] - apos[1]);
                phi_geo.push(slot.position[2] - apos[2]);
                phi_geo.push(slot.timestamp.abs_diff(at) as f64 * dt_scale);
                gather_idx.push(slot.index);
            }
        }
        let phi_geo = g.constant(vec![rows, 4], phi_geo)?;
        let gathered = g.gather_rows(features, &gather_idx)?;
        let phi = g.concat_cols(phi_geo, gathered)?;

        let h = self.encode.forward(g, params, phi, training)?;

        let (e_valid, weights) = if self.config.attention {
            let attend_in = g.concat_cols(phi, h)?;
            let logits = self.attend.forward(g, params, attend_in, training)?;
            let logits = g.reshape(logits, vec![valid.len(), k, d])?;
            let w = g.softmax(logits, 1)?;
            let h3 = g.reshape(h, vec![valid.len(), k, d])?;
            let weighted = g.mul(h3, w)?;
            (g.sum_axis(weighted, 1)?, Some(w))
        } else {
            let h3 = g.reshape(h, vec![valid.len(), k, d])?;
            (g.max_axis(h3, 1)?, None)
        };

        let e = g.scatter_rows(e_valid, &valid, total_groups)?;
        Ok((e, weights))
    }

    /// 1x4 convolution over the anchor axis followed by bias and ReLU:
    /// `f'_i = relu(sum_j e_(i,j) . w_j + b)`.
    pub fn anchor_conv(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        e: NodeId,
    ) -> Result<NodeId, ConvError> {
        let d = self.config.embed_dim;
        let shape = g.shape(e).to_vec();
        if shape.len() != 2 || shape[1] != d || shape[0] % ANCHOR_COUNT != 0 {
            return Err(ConvError::Tensor(TensorError::DimensionMismatch {
                op: "anchor_conv",
                lhs: shape,
                rhs: vec![ANCHOR_COUNT, d],
            }));
        }
        let cores = shape[0] / ANCHOR_COUNT;
        let weight = g.param(params, self.conv_weight);
        let bias = g.param(params, self.conv_bias);
        let mut acc: Option<NodeId> = None;
        for j in 0..ANCHOR_COUNT {
            let e_idx: Vec<usize> = (0..cores).map(|i| i * ANCHOR_COUNT + j).collect();
            let e_j = g.gather_rows(e, &e_idx)?;
            let w_idx: Vec<usize> = (j * d..(j + 1) * d).collect();
            let w_j = g.gather_rows(weight, &w_idx)?;
            let term = g.matmul(e_j, w_j)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, term)?,
                None => term,
            });
        }
        let summed = g.add_bias_row(acc.expect("anchor count is fixed"), bias)?;
        Ok(g.relu(summed))
    }

    /// Full operator on a prepared geometry: embed then convolve.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut ParamSet,
        geom: &ConvGeometry,
        features: NodeId,
        training: bool,
    ) -> Result<NodeId, ConvError> {
        let e = self.attentive_embed(g, params, geom, features, training)?;
        self.anchor_conv(g, params, e)
    }

    /// Value-level pipeline over a raw point set: build geometry, run the
    /// operator, return core points with their new features.
    pub fn asta_conv_forward(
        &self,
        params: &mut ParamSet,
        input: &PointSet,
        input_features: &[f64],
        cores: &CoreSet,
        training: bool,
    ) -> Result<ConvOutput, ConvError> {
        let geom = self.plan(input, cores)?;
        let mut g = Graph::new();
        let features = g.leaf(Tensor::new(
            vec![input.len(), self.config.in_features],
            input_features.to_vec(),
        )?);
        let out = self.forward(&mut g, params, &geom, features, training)?;
        Ok(ConvOutput {
            points: PointSet {
                positions: geom.cores.positions.clone(),
                timestamps: geom.cores.timestamps.clone(),
                frame_count: input.frame_count,
            },
            features: g.data(out).to_vec(),
            feature_dim: self.config.out_features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::NeighborSlot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn radius_spec() -> RadiusSpec {
        RadiusSpec { adjustment: 0.25, band: (0.5, 0.6), level: 0 }
    }

    fn plain_config(c: usize, d: usize, cp: usize) -> AstaConvConfig {
        let mut cfg = AstaConvConfig::new(c, d, cp, 0.05, radius_spec());
        cfg.batch_norm = false;
        cfg
    }

    fn single_core_geometry(layer: &AstaConvLayer, groups: Vec<NeighborGroup>, input_len: usize) -> ConvGeometry {
        let set = PointSet {
            positions: vec![[0.0; 3]],
            timestamps: vec![0],
            frame_count: 4,
        };
        let cores = CoreSet::from_indices(&set, vec![0]);
        let anchors = make_anchors(&cores, layer.config.delta_x).unwrap();
        ConvGeometry { cores, anchors, groups, frame_count: 4, input_len }
    }

    fn empty_group() -> NeighborGroup {
        NeighborGroup { slots: vec![], valid_count: 0 }
    }

    fn slot(index: usize, position: [f64; 3], timestamp: u32) -> NeighborSlot {
        NeighborSlot { index, position, timestamp }
    }

    #[test]
    fn identical_neighbors_give_uniform_attention_and_e_equals_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let layer = AstaConvLayer::new(&mut params, "l", plain_config(2, 5, 3), &mut rng).unwrap();
        let k = layer.config.neighbors;

        let p = [0.3, -0.1, 0.2];
        let group = NeighborGroup {
            slots: vec![slot(0, p, 1); k],
            valid_count: k,
        };
        let geom = single_core_geometry(&layer, vec![group, empty_group(), empty_group(), empty_group()], 1);

        let mut g = Graph::new();
        let features = g.constant(vec![1, 2], vec![0.7, -0.4]).unwrap();
        let (e, w) = layer
            .embed_with_weights(&mut g, &mut params, &geom, features, false)
            .unwrap();
        let w = w.unwrap();
        for &wv in g.data(w) {
            assert!((wv - 1.0 / k as f64).abs() < 1e-12);
        }
        // e equals the shared encoding h of the lone neighbor; max pooling
        // over identical rows recovers exactly that h
        let d = layer.config.embed_dim;
        let e_row = g.data(e)[..d].to_vec();
        let mut cfg2 = plain_config(2, 5, 3);
        cfg2.attention = false;
        let mut params2 = ParamSet::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let layer2 = AstaConvLayer::new(&mut params2, "l", cfg2, &mut rng2).unwrap();
        let k2 = layer2.config.neighbors;
        let group2 = NeighborGroup { slots: vec![slot(0, p, 1); k2], valid_count: k2 };
        let geom2 = single_core_geometry(&layer2, vec![group2, empty_group(), empty_group(), empty_group()], 1);
        let mut g2 = Graph::new();
        let features2 = g2.constant(vec![1, 2], vec![0.7, -0.4]).unwrap();
        let e2 = layer2
            .attentive_embed(&mut g2, &mut params2, &geom2, features2, false)
            .unwrap();
        for (a, b) in e_row.iter().zip(&g2.data(e2)[..d]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_anchor_emits_exact_zeros_and_no_parameter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let layer = AstaConvLayer::new(&mut params, "l", plain_config(1, 4, 2), &mut rng).unwrap();
        let geom = single_core_geometry(&layer, vec![empty_group(); ANCHOR_COUNT], 1);
        params.zero_grads();
        let mut g = Graph::new();
        let features = g.constant(vec![1, 1], vec![0.5]).unwrap();
        let out = layer.forward(&mut g, &mut params, &geom, features, false).unwrap();
        // conv of all-zero embeddings leaves only the bias
        let bias_id = params.id_of("l.conv.bias").unwrap();
        let bias = params.get(bias_id).tensor.data.clone();
        for (o, b) in g.data(out).iter().zip(&bias) {
            assert_eq!(*o, b.max(0.0));
        }
        let loss = g.mean_all(out);
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut params);
        for p in params.iter() {
            if p.trainable() && !p.name.ends_with("conv.bias") {
                assert!(
                    p.tensor.grad.as_deref().unwrap().iter().all(|&v| v == 0.0),
                    "unexpected gradient in {}",
                    p.name
                );
            }
        }
    }

    #[test]
    fn two_neighbor_hand_oracle() {
        // identity encode, doubled logits: both MLPs set by hand, K = 2
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 2;
        let d = 4 + c;
        let mut cfg = plain_config(c, d, 3);
        cfg.neighbors = 2;
        cfg.encode_hidden = vec![];
        cfg.attend_hidden = vec![];
        let mut params = ParamSet::new();
        let layer = AstaConvLayer::new(&mut params, "l", cfg, &mut rng).unwrap();

        // encode: W = I, b = 0 so h = relu(phi) = phi for non-negative phi
        let w_enc = params.id_of("l.encode.0.weight").unwrap();
        let mut ident = vec![0.0; d * d];
        for i in 0..d {
            ident[i * d + i] = 1.0;
        }
        params.get_mut(w_enc).tensor.data.copy_from_slice(&ident);
        // attend: stacked identities, logits = phi + h = 2 phi
        let w_att = params.id_of("l.attend.0.weight").unwrap();
        let mut stacked = vec![0.0; 2 * d * d];
        for i in 0..d {
            stacked[i * d + i] = 1.0;
            stacked[(d + i) * d + i] = 1.0;
        }
        params.get_mut(w_att).tensor.data.copy_from_slice(&stacked);

        let geom_probe = single_core_geometry(&layer, vec![], 2);
        let a0 = geom_probe.anchors.positions[0];
        let n1 = [a0[0] + 0.10, a0[1] + 0.20, a0[2] + 0.30];
        let n2 = [a0[0] + 0.05, a0[1] + 0.15, a0[2] + 0.25];
        let group = NeighborGroup {
            slots: vec![slot(0, n1, 1), slot(1, n2, 2)],
            valid_count: 2,
        };
        let geom = single_core_geometry(&layer, vec![group, empty_group(), empty_group(), empty_group()], 2);

        let f1 = [0.6, 0.9];
        let f2 = [0.4, 0.7];
        let mut g = Graph::new();
        let features = g
            .constant(vec![2, c], vec![f1[0], f1[1], f2[0], f2[1]])
            .unwrap();
        let e = layer
            .attentive_embed(&mut g, &mut params, &geom, features, false)
            .unwrap();

        // pencil-and-paper evaluation of the aggregation
        let phi1 = [0.10, 0.20, 0.30, 1.0, f1[0], f1[1]];
        let phi2 = [0.05, 0.15, 0.25, 2.0, f2[0], f2[1]];
        for ch in 0..d {
            let (l1, l2) = (2.0 * phi1[ch], 2.0 * phi2[ch]);
            let m = l1.max(l2);
            let (x1, x2) = ((l1 - m).exp(), (l2 - m).exp());
            let w1 = x1 / (x1 + x2);
            let w2 = x2 / (x1 + x2);
            let expect = phi1[ch] * w1 + phi2[ch] * w2;
            assert!(
                (g.data(e)[ch] - expect).abs() < 1e-9,
                "channel {}: {} vs {}",
                ch,
                g.data(e)[ch],
                expect
            );
        }
        // the three empty anchors stay zero
        assert!(g.data(e)[d..].iter().all(|&v| v == 0.0));
    }

    fn contraction_oracle(e: &[f64], w: &[f64], b: &[f64], cores: usize, d: usize, cp: usize) -> Vec<f64> {
        let mut out = vec![0.0; cores * cp];
        for i in 0..cores {
            for o in 0..cp {
                let mut s = b[o];
                for j in 0..ANCHOR_COUNT {
                    for dd in 0..d {
                        s += e[(i * ANCHOR_COUNT + j) * d + dd] * w[(j * d + dd) * cp + o];
                    }
                }
                out[i * cp + o] = s.max(0.0);
            }
        }
        out
    }

    #[test]
    fn anchor_conv_zero_embedding_gives_relu_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let layer = AstaConvLayer::new(&mut params, "l", plain_config(1, 3, 2), &mut rng).unwrap();
        let bias_id = params.id_of("l.conv.bias").unwrap();
        params.get_mut(bias_id).tensor.data.copy_from_slice(&[0.5, -0.5]);
        let mut g = Graph::new();
        let e = g.constant(vec![2 * ANCHOR_COUNT, 3], vec![0.0; 2 * ANCHOR_COUNT * 3]).unwrap();
        let out = layer.anchor_conv(&mut g, &params, e).unwrap();
        assert_eq!(g.data(out), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn anchor_conv_averaging_kernel() {
        // w_j = I / 4 for every anchor turns the convolution into a mean
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let mut params = ParamSet::new();
        let layer = AstaConvLayer::new(&mut params, "l", plain_config(1, d, d), &mut rng).unwrap();
        let w_id = params.id_of("l.conv.weight").unwrap();
        let mut w = vec![0.0; ANCHOR_COUNT * d * d];
        for j in 0..ANCHOR_COUNT {
            for i in 0..d {
                w[(j * d + i) * d + i] = 0.25;
            }
        }
        params.get_mut(w_id).tensor.data.copy_from_slice(&w);
        let b_id = params.id_of("l.conv.bias").unwrap();
        params.get_mut(b_id).tensor.data.copy_from_slice(&[0.0; 3]);

        let e_data: Vec<f64> = (0..ANCHOR_COUNT * d).map(|i| i as f64 / 4.0).collect();
        let mut g = Graph::new();
        let e = g.constant(vec![ANCHOR_COUNT, d], e_data.clone()).unwrap();
        let out = layer.anchor_conv(&mut g, &params, e).unwrap();
        for ch in 0..d {
            let mean = (0..ANCHOR_COUNT).map(|j| e_data[j * d + ch]).sum::<f64>() / 4.0;
            assert!((g.data(out)[ch] - mean.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_conv_matches_contraction_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (d, cp, cores) = (5, 4, 3);
        let mut params = ParamSet::new();
        let layer = AstaConvLayer::new(&mut params, "l", plain_config(1, d, cp), &mut rng).unwrap();
        let e_data: Vec<f64> = (0..cores * ANCHOR_COUNT * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = params.get(params.id_of("l.conv.weight").unwrap()).tensor.data.clone();
        let b = params.get(params.id_of("l.conv.bias").unwrap()).tensor.data.clone();
        let expected = contraction_oracle(&e_data, &w, &b, cores, d, cp);
        let mut g = Graph::new();
        let e = g.constant(vec![cores * ANCHOR_COUNT, d], e_data).unwrap();
        let out = layer.anchor_conv(&mut g, &params, e).unwrap();
        for (got, want) in g.data(out).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_dim_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        let layer = AstaConvLayer::new(&mut params, "l", plain_config(2, 4, 2), &mut rng).unwrap();
        let geom = single_core_geometry(&layer, vec![empty_group(); ANCHOR_COUNT], 1);
        let mut g = Graph::new();
        let wrong = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            layer.attentive_embed(&mut g, &mut params, &geom, wrong, false),
            Err(ConvError::FeatureDimMismatch { expected: 2, actual: 3 })
        ));
    }
}

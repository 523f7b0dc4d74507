//! Network assemblies: a classification network (3 sampling + convolution
//! stages, global max pooling, two fully connected layers) and a U-shaped
//! segmentation network (4 encoder stages, 4 decoder stages with
//! inverse-distance upsampling and skip connections).

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::RadiusSchedule;
use crate::conv::{AstaConvConfig, AstaConvLayer, ConvError, ConvGeometry, RadiusSpec};
use crate::geom::{sample_cores, GeomError, PointCloudSequence, PointSet};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::nn::{Linear, Mlp, ParamSet};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug)]
pub enum NetError {
    Tensor(TensorError),
    Geom(GeomError),
    Conv(ConvError),
    InvalidSpec(String),
    FeatureComposition { expected: usize, actual: usize },
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::Tensor(e) => write!(f, "{}", e),
            NetError::Geom(e) => write!(f, "{}", e),
            NetError::Conv(e) => write!(f, "{}", e),
            NetError::InvalidSpec(msg) => write!(f, "invalid network spec: {}", msg),
            NetError::FeatureComposition { expected, actual } => {
                write!(f, "input composition expects {} stored feature channels, got {}", expected, actual)
            }
        }
    }
}

impl std::error::Error for NetError {}

impl From<TensorError> for NetError {
    fn from(e: TensorError) -> Self {
        NetError::Tensor(e)
    }
}

impl From<GeomError> for NetError {
    fn from(e: GeomError) -> Self {
        NetError::Geom(e)
    }
}

impl From<ConvError> for NetError {
    fn from(e: ConvError) -> Self {
        NetError::Conv(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

/// One sampling + convolution stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub core_count: usize,
    /// Output channels c'.
    pub channels: usize,
    /// Embedding width d.
    pub embed_dim: usize,
    /// Anchor scale; defaults to half the level's zero-interval radius.
    #[serde(default)]
    pub delta_x: Option<f64>,
    /// Hidden widths of both MLPs; default one hidden layer of width d.
    #[serde(default)]
    pub mlp_hidden: Option<Vec<usize>>,
}

/// Declarative network configuration. Thresholds like anchor count (4) and
/// neighbor count (8) are fixed by the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub task: Task,
    pub class_count: usize,
    pub stages: Vec<StageSpec>,
    /// Initial-radius band scaled by `radius_adjustment`, doubled per level.
    pub radius_adjustment: f64,
    pub radius_band: (f64, f64),
    /// Hidden width of the classification head.
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    /// Channel widths of the 4 decoder stages (segmentation).
    #[serde(default)]
    pub decoder_channels: Vec<usize>,
    /// Run the anchor convolution at each decoder level before the shared
    /// MLP (segmentation).
    #[serde(default = "default_true")]
    pub decoder_conv: bool,
    /// Softmax attention aggregation; false swaps in per-channel max
    /// pooling over the neighbors.
    #[serde(default = "default_true")]
    pub attention_enabled: bool,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    #[serde(default)]
    pub normalize_dt: bool,
}

fn default_head_hidden() -> usize {
    128
}

fn default_true() -> bool {
    true
}

pub const CLASSIFICATION_STAGES: usize = 3;
pub const SEGMENTATION_STAGES: usize = 4;

impl NetworkSpec {
    /// Action-recognition style defaults: 20 classes, three stages.
    pub fn classification_default(class_count: usize) -> Self {
        let cores = [256, 64, 16];
        let channels = [64, 128, 256];
        NetworkSpec {
            task: Task::Classification,
            class_count,
            stages: (0..3)
                .map(|i| StageSpec {
                    core_count: cores[i],
                    channels: channels[i],
                    embed_dim: channels[i],
                    delta_x: None,
                    mlp_hidden: None,
                })
                .collect(),
            radius_adjustment: 0.25,
            radius_band: (0.5, 0.6),
            head_hidden: 128,
            decoder_channels: Vec::new(),
            decoder_conv: true,
            attention_enabled: true,
            batch_norm: true,
            normalize_dt: false,
        }
    }

    /// Semantic-segmentation style defaults: 12 classes, four levels each way.
    pub fn segmentation_default(class_count: usize) -> Self {
        let cores = [2048, 512, 128, 32];
        let channels = [64, 128, 256, 256];
        NetworkSpec {
            task: Task::Segmentation,
            class_count,
            stages: (0..4)
                .map(|i| StageSpec {
                    core_count: cores[i],
                    channels: channels[i],
                    embed_dim: channels[i],
                    delta_x: None,
                    mlp_hidden: None,
                })
                .collect(),
            radius_adjustment: 1.1,
            radius_band: (0.98, 1.0),
            head_hidden: 128,
            decoder_channels: vec![256, 128, 128, 128],
            decoder_conv: true,
            attention_enabled: true,
            batch_norm: true,
            normalize_dt: false,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let expected_stages = match self.task {
            Task::Classification => CLASSIFICATION_STAGES,
            Task::Segmentation => SEGMENTATION_STAGES,
        };
        if self.stages.len() != expected_stages {
            return Err(NetError::InvalidSpec(format!(
                "{:?} needs {} stages, spec has {}",
                self.task,
                expected_stages,
                self.stages.len()
            )));
        }
        for w in self.stages.windows(2) {
            if w[1].core_count >= w[0].core_count {
                return Err(NetError::InvalidSpec(format!(
                    "core counts must strictly decrease, got {} then {}",
                    w[0].core_count, w[1].core_count
                )));
            }
        }
        if self.class_count < 2 {
            return Err(NetError::InvalidSpec("need at least 2 classes".into()));
        }
        if self.task == Task::Segmentation && self.decoder_channels.len() != SEGMENTATION_STAGES {
            return Err(NetError::InvalidSpec(format!(
                "segmentation needs {} decoder channel widths, got {}",
                SEGMENTATION_STAGES,
                self.decoder_channels.len()
            )));
        }
        if self.radius_adjustment <= 0.0 || self.radius_band.0 <= 0.0 || self.radius_band.1 < self.radius_band.0 {
            return Err(NetError::InvalidSpec("radius band must be positive and ordered".into()));
        }
        Ok(())
    }

    /// Channels of the raw input composition for this task.
    pub fn input_channels(&self) -> usize {
        match self.task {
            Task::Classification => 1,
            Task::Segmentation => 4,
        }
    }

    fn conv_config(&self, level: usize, in_features: usize) -> AstaConvConfig {
        let stage = &self.stages[level];
        let delta_x = stage.delta_x.unwrap_or_else(|| {
            RadiusSchedule::default_delta_x(self.radius_adjustment, self.radius_band.0, level as u32)
        });
        let mut cfg = AstaConvConfig::new(
            in_features,
            stage.embed_dim,
            stage.channels,
            delta_x,
            RadiusSpec {
                adjustment: self.radius_adjustment,
                band: self.radius_band,
                level: level as u32,
            },
        );
        if let Some(hidden) = &stage.mlp_hidden {
            cfg.encode_hidden = hidden.clone();
            cfg.attend_hidden = hidden.clone();
        }
        cfg.attention = self.attention_enabled;
        cfg.batch_norm = self.batch_norm;
        cfg.normalize_dt = self.normalize_dt;
        cfg
    }
}

/// Classification input: the 1D timestamp is the only raw feature.
pub fn timestamp_features(seq: &PointCloudSequence) -> Vec<f64> {
    seq.timestamps().iter().map(|&t| t as f64).collect()
}

/// Segmentation input: stored RGB color plus the 1D timestamp.
pub fn rgb_timestamp_features(seq: &PointCloudSequence) -> Result<Vec<f64>, NetError> {
    if seq.feature_dim() != 3 {
        return Err(NetError::FeatureComposition { expected: 3, actual: seq.feature_dim() });
    }
    let mut out = Vec::with_capacity(seq.len() * 4);
    for i in 0..seq.len() {
        out.extend_from_slice(seq.feature(i));
        out.push(seq.timestamps()[i] as f64);
    }
    Ok(out)
}

struct ConvStage {
    core_count: usize,
    layer: AstaConvLayer,
}

/// Precomputed geometry of one classification forward pass. Built from
/// positions and timestamps only, so one plan serves every epoch. Plans of
/// several sequences can be merged into one so a whole optimizer batch
/// flows through a single forward pass (batch norm then normalizes over
/// the batch, not a lone sequence).
pub struct ClassPlan {
    geoms: Vec<ConvGeometry>,
    input_features: Vec<f64>,
    input_len: usize,
    /// Core rows of the final stage per merged sequence.
    final_core_counts: Vec<usize>,
}

fn merge_geometries(geoms: &[&ConvGeometry], input_offsets: &[usize]) -> ConvGeometry {
    let mut cores = crate::geom::CoreSet {
        indices: Vec::new(),
        positions: Vec::new(),
        timestamps: Vec::new(),
    };
    let mut anchors = crate::anchors::AnchorSet {
        positions: Vec::new(),
        timestamps: Vec::new(),
        delta_x: geoms[0].anchors.delta_x,
        core_count: 0,
    };
    let mut groups = Vec::new();
    let mut input_len = 0;
    for (geom, &offset) in geoms.iter().zip(input_offsets) {
        cores.indices.extend(geom.cores.indices.iter().map(|i| i + offset));
        cores.positions.extend_from_slice(&geom.cores.positions);
        cores.timestamps.extend_from_slice(&geom.cores.timestamps);
        anchors.positions.extend_from_slice(&geom.anchors.positions);
        anchors.timestamps.extend_from_slice(&geom.anchors.timestamps);
        anchors.core_count += geom.anchors.core_count;
        for group in &geom.groups {
            let mut group = group.clone();
            for slot in &mut group.slots {
                slot.index += offset;
            }
            groups.push(group);
        }
        input_len += geom.input_len;
    }
    ConvGeometry {
        cores,
        anchors,
        groups,
        frame_count: geoms[0].frame_count,
        input_len,
    }
}

fn offsets_of(lens: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut acc = 0;
    for len in lens {
        out.push(acc);
        acc += len;
    }
    out
}

impl ClassPlan {
    /// Merge single-sequence plans into one batch plan.
    pub fn merge(plans: &[&ClassPlan]) -> ClassPlan {
        assert!(!plans.is_empty());
        let stage_count = plans[0].geoms.len();
        let mut geoms = Vec::with_capacity(stage_count);
        for stage in 0..stage_count {
            let input_offsets = if stage == 0 {
                offsets_of(plans.iter().map(|p| p.input_len))
            } else {
                offsets_of(plans.iter().map(|p| p.geoms[stage - 1].cores.len()))
            };
            let stage_geoms: Vec<&ConvGeometry> = plans.iter().map(|p| &p.geoms[stage]).collect();
            geoms.push(merge_geometries(&stage_geoms, &input_offsets));
        }
        let mut input_features = Vec::new();
        let mut final_core_counts = Vec::new();
        for p in plans {
            input_features.extend_from_slice(&p.input_features);
            final_core_counts.extend_from_slice(&p.final_core_counts);
        }
        ClassPlan {
            geoms,
            input_features,
            input_len: plans.iter().map(|p| p.input_len).sum(),
            final_core_counts,
        }
    }

    pub fn sequence_count(&self) -> usize {
        self.final_core_counts.len()
    }
}

pub struct ClassificationNetwork {
    pub spec: NetworkSpec,
    stages: Vec<ConvStage>,
    fc1: Linear,
    fc2: Linear,
}

impl ClassificationNetwork {
    /// Build with weights drawn from a seeded generator.
    pub fn init(spec: NetworkSpec, params: &mut ParamSet, init_seed: u64) -> Result<Self, NetError> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(init_seed);
        Self::new(spec, params, &mut rng)
    }

    pub fn new(spec: NetworkSpec, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self, NetError> {
        spec.validate()?;
        if spec.task != Task::Classification {
            return Err(NetError::InvalidSpec("spec task is not classification".into()));
        }
        let mut stages = Vec::new();
        let mut in_features = spec.input_channels();
        for (level, stage) in spec.stages.iter().enumerate() {
            let cfg = spec.conv_config(level, in_features);
            let layer = AstaConvLayer::new(params, &format!("stage{level}"), cfg, rng)?;
            in_features = stage.channels;
            stages.push(ConvStage { core_count: stage.core_count, layer });
        }
        let fc1 = Linear::new(params, "head.fc1", in_features, spec.head_hidden, rng)?;
        let fc2 = Linear::new(params, "head.fc2", spec.head_hidden, spec.class_count, rng)?;
        Ok(ClassificationNetwork { spec, stages, fc1, fc2 })
    }

    pub fn plan(&self, seq: &PointCloudSequence) -> Result<ClassPlan, NetError> {
        self.plan_with_seed(seq, 0)
    }

    /// `fps_seed` selects the first core point (training-time augmentation).
    pub fn plan_with_seed(&self, seq: &PointCloudSequence, fps_seed: usize) -> Result<ClassPlan, NetError> {
        let mut set = seq.point_set();
        let mut geoms = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let cores = sample_cores(&set, stage.core_count, fps_seed % set.len().max(1))?;
            let geom = stage.layer.plan(&set, &cores)?;
            set = PointSet {
                positions: geom.cores.positions.clone(),
                timestamps: geom.cores.timestamps.clone(),
                frame_count: set.frame_count,
            };
            geoms.push(geom);
        }
        let final_cores = geoms.last().map(|g| g.cores.len()).unwrap_or(0);
        Ok(ClassPlan {
            geoms,
            input_features: timestamp_features(seq),
            input_len: seq.len(),
            final_core_counts: vec![final_cores],
        })
    }

    /// Logits, one row per merged sequence in the plan.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut ParamSet,
        plan: &ClassPlan,
        training: bool,
    ) -> Result<NodeId, NetError> {
        let mut feats = g.leaf(Tensor::new(
            vec![plan.input_len, self.spec.input_channels()],
            plan.input_features.clone(),
        )?);
        for (stage, geom) in self.stages.iter().zip(&plan.geoms) {
            feats = stage.layer.forward(g, params, geom, feats, training)?;
        }
        // channel-wise max over each sequence's remaining cores
        let channels = self.stages.last().unwrap().layer.config.out_features;
        let mut pooled_rows = Vec::with_capacity(plan.final_core_counts.len());
        let mut offset = 0;
        for &count in &plan.final_core_counts {
            let idx: Vec<usize> = (offset..offset + count).collect();
            let rows = g.gather_rows(feats, &idx)?;
            let pooled = g.max_axis(rows, 0)?;
            pooled_rows.push(g.reshape(pooled, vec![1, channels])?);
            offset += count;
        }
        let pooled = g.concat_rows(&pooled_rows)?;
        let hidden = self.fc1.forward(g, params, pooled)?;
        let hidden = g.relu(hidden);
        Ok(self.fc2.forward(g, params, hidden)?)
    }

    /// Value-level inference: logits for one sequence.
    pub fn classify(&self, params: &mut ParamSet, seq: &PointCloudSequence) -> Result<Vec<f64>, NetError> {
        let plan = self.plan(seq)?;
        let mut g = Graph::new();
        let logits = self.forward(&mut g, params, &plan, false)?;
        Ok(g.data(logits).to_vec())
    }
}

/// Inverse-distance interpolation plan: 3 nearest sources per target with
/// normalized 1/d weights; an exact positional match takes all the weight.
pub struct InterpPlan {
    indices: Vec<[usize; 3]>,
    weights: Vec<[f64; 3]>,
}

pub fn plan_interpolation(targets: &[[f64; 3]], sources: &[[f64; 3]]) -> InterpPlan {
    assert!(!sources.is_empty(), "interpolation needs at least one source");
    let mut indices = Vec::with_capacity(targets.len());
    let mut weights = Vec::with_capacity(targets.len());
    for t in targets {
        let mut best: Vec<(f64, usize)> = sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let d2 = (t[0] - s[0]).powi(2) + (t[1] - s[1]).powi(2) + (t[2] - s[2]).powi(2);
                (d2, i)
            })
            .collect();
        best.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        best.truncate(3);
        while best.len() < 3 {
            best.push(best[0]);
        }
        let mut idx = [best[0].1, best[1].1, best[2].1];
        let mut w = [0.0f64; 3];
        if best[0].0 == 0.0 {
            // exact match dominates
            w[0] = 1.0;
            idx = [best[0].1; 3];
        } else {
            let inv: Vec<f64> = best.iter().map(|(d2, _)| 1.0 / d2.sqrt()).collect();
            let total: f64 = inv.iter().sum();
            for k in 0..3 {
                w[k] = inv[k] / total;
            }
        }
        indices.push(idx);
        weights.push(w);
    }
    InterpPlan { indices, weights }
}

pub fn apply_interpolation(
    g: &mut Graph,
    plan: &InterpPlan,
    source_features: NodeId,
) -> Result<NodeId, TensorError> {
    let mut acc: Option<NodeId> = None;
    for k in 0..3 {
        let idx: Vec<usize> = plan.indices.iter().map(|row| row[k]).collect();
        let w: Vec<f64> = plan.weights.iter().map(|row| row[k]).collect();
        let gathered = g.gather_rows(source_features, &idx)?;
        let scaled = g.scale_rows(gathered, &w)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("three interpolation terms"))
}

struct DecoderStage {
    conv: Option<AstaConvLayer>,
    mlp: Mlp,
}

/// Precomputed geometry of one segmentation pass: encoder sampling plus
/// decoder interpolation and (optionally) decoder convolution geometry.
/// Like [`ClassPlan`], single-sequence plans merge into batch plans.
pub struct SegPlan {
    enc_geoms: Vec<ConvGeometry>,
    dec_geoms: Vec<Option<ConvGeometry>>,
    interp: Vec<InterpPlan>,
    input_features: Vec<f64>,
    input_len: usize,
}

impl SegPlan {
    fn level_counts(&self, level: usize) -> usize {
        if level == 0 {
            self.input_len
        } else {
            self.enc_geoms[level - 1].cores.len()
        }
    }

    /// Merge single-sequence plans into one batch plan. Output rows stay
    /// grouped by sequence in input order.
    pub fn merge(plans: &[&SegPlan]) -> SegPlan {
        assert!(!plans.is_empty());
        let enc_count = plans[0].enc_geoms.len();
        let mut enc_geoms = Vec::with_capacity(enc_count);
        for stage in 0..enc_count {
            let input_offsets = offsets_of(plans.iter().map(|p| p.level_counts(stage)));
            let stage_geoms: Vec<&ConvGeometry> = plans.iter().map(|p| &p.enc_geoms[stage]).collect();
            enc_geoms.push(merge_geometries(&stage_geoms, &input_offsets));
        }

        let dec_count = plans[0].dec_geoms.len();
        let mut dec_geoms = Vec::with_capacity(dec_count);
        let mut interp = Vec::with_capacity(dec_count);
        for stage in 0..dec_count {
            let target_level = dec_count - 1 - stage;
            let source_offsets = offsets_of(plans.iter().map(|p| p.level_counts(target_level + 1)));
            let mut indices = Vec::new();
            let mut weights = Vec::new();
            for (p, &off) in plans.iter().zip(&source_offsets) {
                for row in &p.interp[stage].indices {
                    indices.push([row[0] + off, row[1] + off, row[2] + off]);
                }
                weights.extend_from_slice(&p.interp[stage].weights);
            }
            interp.push(InterpPlan { indices, weights });

            if plans[0].dec_geoms[stage].is_some() {
                let target_offsets = offsets_of(plans.iter().map(|p| p.level_counts(target_level)));
                let stage_geoms: Vec<&ConvGeometry> = plans
                    .iter()
                    .map(|p| p.dec_geoms[stage].as_ref().expect("uniform decoder planning"))
                    .collect();
                dec_geoms.push(Some(merge_geometries(&stage_geoms, &target_offsets)));
            } else {
                dec_geoms.push(None);
            }
        }

        let mut input_features = Vec::new();
        for p in plans {
            input_features.extend_from_slice(&p.input_features);
        }
        SegPlan {
            enc_geoms,
            dec_geoms,
            interp,
            input_features,
            input_len: plans.iter().map(|p| p.input_len).sum(),
        }
    }
}

pub struct SegmentationNetwork {
    pub spec: NetworkSpec,
    encoder: Vec<ConvStage>,
    decoder: Vec<DecoderStage>,
    classifier: Linear,
}

impl SegmentationNetwork {
    /// Build with weights drawn from a seeded generator.
    pub fn init(spec: NetworkSpec, params: &mut ParamSet, init_seed: u64) -> Result<Self, NetError> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(init_seed);
        Self::new(spec, params, &mut rng)
    }

    pub fn new(spec: NetworkSpec, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self, NetError> {
        spec.validate()?;
        if spec.task != Task::Segmentation {
            return Err(NetError::InvalidSpec("spec task is not segmentation".into()));
        }
        let mut encoder = Vec::new();
        let mut in_features = spec.input_channels();
        for (level, stage) in spec.stages.iter().enumerate() {
            let cfg = spec.conv_config(level, in_features);
            let layer = AstaConvLayer::new(params, &format!("enc{level}"), cfg, rng)?;
            in_features = stage.channels;
            encoder.push(ConvStage { core_count: stage.core_count, layer });
        }

        // decoder stage i targets encoder level 3-i (level 0 = raw points)
        let mut decoder = Vec::new();
        let mut up_channels = spec.stages.last().unwrap().channels;
        for i in 0..SEGMENTATION_STAGES {
            let target_level = SEGMENTATION_STAGES - 1 - i;
            let skip_channels = if target_level == 0 {
                spec.input_channels()
            } else {
                spec.stages[target_level - 1].channels
            };
            let concat = up_channels + skip_channels;
            let out_ch = spec.decoder_channels[i];
            let conv = if spec.decoder_conv {
                let mut cfg = spec.conv_config(target_level.min(spec.stages.len() - 1), concat);
                cfg.out_features = out_ch;
                cfg.embed_dim = out_ch;
                cfg.encode_hidden = vec![out_ch];
                cfg.attend_hidden = vec![out_ch];
                cfg.radius.level = target_level as u32;
                cfg.delta_x = spec.stages[target_level.min(spec.stages.len() - 1)]
                    .delta_x
                    .unwrap_or_else(|| {
                        RadiusSchedule::default_delta_x(
                            spec.radius_adjustment,
                            spec.radius_band.0,
                            target_level as u32,
                        )
                    });
                Some(AstaConvLayer::new(params, &format!("dec{i}.conv"), cfg, rng)?)
            } else {
                None
            };
            let mlp_in = if conv.is_some() { out_ch } else { concat };
            let mlp = Mlp::new(
                params,
                &format!("dec{i}.mlp"),
                &[mlp_in, out_ch],
                spec.batch_norm,
                true,
                rng,
            )?;
            decoder.push(DecoderStage { conv, mlp });
            up_channels = out_ch;
        }
        let classifier = Linear::new(params, "head.classifier", up_channels, spec.class_count, rng)?;
        Ok(SegmentationNetwork { spec, encoder, decoder, classifier })
    }

    pub fn plan(&self, seq: &PointCloudSequence) -> Result<SegPlan, NetError> {
        self.plan_with_seed(seq, 0)
    }

    pub fn plan_with_seed(&self, seq: &PointCloudSequence, fps_seed: usize) -> Result<SegPlan, NetError> {
        let mut level_points: Vec<PointSet> = vec![seq.point_set()];
        let mut enc_geoms = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let set = level_points.last().unwrap();
            let cores = sample_cores(set, stage.core_count, fps_seed % set.len().max(1))?;
            let geom = stage.layer.plan(set, &cores)?;
            level_points.push(PointSet {
                positions: geom.cores.positions.clone(),
                timestamps: geom.cores.timestamps.clone(),
                frame_count: set.frame_count,
            });
            enc_geoms.push(geom);
        }

        let mut interp = Vec::with_capacity(SEGMENTATION_STAGES);
        let mut dec_geoms = Vec::with_capacity(SEGMENTATION_STAGES);
        for i in 0..SEGMENTATION_STAGES {
            let target_level = SEGMENTATION_STAGES - 1 - i;
            let source = &level_points[target_level + 1];
            let target = &level_points[target_level];
            interp.push(plan_interpolation(&target.positions, &source.positions));
            match &self.decoder[i].conv {
                Some(layer) => {
                    let cores = crate::geom::CoreSet::from_indices(
                        target,
                        (0..target.len()).collect(),
                    );
                    dec_geoms.push(Some(layer.plan(target, &cores)?));
                }
                None => dec_geoms.push(None),
            }
        }
        Ok(SegPlan {
            enc_geoms,
            dec_geoms,
            interp,
            input_features: rgb_timestamp_features(seq)?,
            input_len: seq.len(),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut ParamSet,
        plan: &SegPlan,
        training: bool,
    ) -> Result<NodeId, NetError> {
        let input = g.leaf(Tensor::new(
            vec![plan.input_len, self.spec.input_channels()],
            plan.input_features.clone(),
        )?);
        let mut skips: Vec<NodeId> = vec![input];
        let mut feats = input;
        for (stage, geom) in self.encoder.iter().zip(&plan.enc_geoms) {
            feats = stage.layer.forward(g, params, geom, feats, training)?;
            skips.push(feats);
        }

        let mut y = feats;
        for i in 0..SEGMENTATION_STAGES {
            let target_level = SEGMENTATION_STAGES - 1 - i;
            let up = apply_interpolation(g, &plan.interp[i], y)?;
            let cat = g.concat_cols(up, skips[target_level])?;
            let stage = &self.decoder[i];
            let mixed = match (&stage.conv, &plan.dec_geoms[i]) {
                (Some(layer), Some(geom)) => layer.forward(g, params, geom, cat, training)?,
                _ => cat,
            };
            y = stage.mlp.forward(g, params, mixed, training)?;
        }
        Ok(self.classifier.forward(g, params, y)?)
    }

    /// Value-level inference: per-point logits, rows aligned with the
    /// input point order.
    pub fn segment(&self, params: &mut ParamSet, seq: &PointCloudSequence) -> Result<Vec<f64>, NetError> {
        let plan = self.plan(seq)?;
        let mut g = Graph::new();
        let logits = self.forward(&mut g, params, &plan, false)?;
        Ok(g.data(logits).to_vec())
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_classification_spec(class_count: usize) -> NetworkSpec {
        let mut spec = NetworkSpec::classification_default(class_count);
        let cores = [24, 12, 6];
        let ch = [8, 12, 16];
        for (i, s) in spec.stages.iter_mut().enumerate() {
            s.core_count = cores[i];
            s.channels = ch[i];
            s.embed_dim = ch[i];
        }
        spec.head_hidden = 16;
        spec
    }

    fn tiny_sequence(seed: u64) -> PointCloudSequence {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 4u32;
        let per_frame = 16;
        let mut positions = Vec::new();
        let mut timestamps = Vec::new();
        for t in 0..frames {
            for _ in 0..per_frame {
                positions.push([
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]);
                timestamps.push(t);
            }
        }
        PointCloudSequence::new(positions, timestamps, vec![], 0, None, frames).unwrap()
    }

    #[test]
    fn zeroed_head_gives_uniform_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let net = ClassificationNetwork::new(tiny_classification_spec(4), &mut params, &mut rng).unwrap();
        for name in ["head.fc2.weight", "head.fc2.bias"] {
            let id = params.id_of(name).unwrap();
            params.get_mut(id).tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = net.classify(&mut params, &tiny_sequence(1)).unwrap();
        assert_eq!(logits.len(), 4);
        assert!(logits.iter().all(|&v| v == logits[0]));
    }

    #[test]
    fn identical_sequences_give_identical_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let net = ClassificationNetwork::new(tiny_classification_spec(4), &mut params, &mut rng).unwrap();
        let seq = tiny_sequence(7);
        let a = net.classify(&mut params, &seq).unwrap();
        let b = net.classify(&mut params, &seq).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logits_are_invariant_to_final_core_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let net = ClassificationNetwork::new(tiny_classification_spec(4), &mut params, &mut rng).unwrap();
        let seq = tiny_sequence(11);
        let plan = net.plan(&seq).unwrap();
        let mut g = Graph::new();
        let base = net.forward(&mut g, &mut params, &plan, false).unwrap();
        let base = g.data(base).to_vec();

        // permute the last stage's cores together with their groups
        let mut permuted = net.plan(&seq).unwrap();
        let last = permuted.geoms.last_mut().unwrap();
        let n = last.cores.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        last.cores.indices = perm.iter().map(|&i| last.cores.indices[i]).collect();
        last.cores.positions = perm.iter().map(|&i| last.cores.positions[i]).collect();
        last.cores.timestamps = perm.iter().map(|&i| last.cores.timestamps[i]).collect();
        let mut groups = Vec::with_capacity(n * 4);
        let mut anchors_pos = Vec::with_capacity(n * 4);
        let mut anchors_t = Vec::with_capacity(n * 4);
        for &i in &perm {
            for j in 0..4 {
                groups.push(last.groups[i * 4 + j].clone());
                anchors_pos.push(last.anchors.positions[i * 4 + j]);
                anchors_t.push(last.anchors.timestamps[i * 4 + j]);
            }
        }
        last.groups = groups;
        last.anchors.positions = anchors_pos;
        last.anchors.timestamps = anchors_t;

        let mut g2 = Graph::new();
        let out = net.forward(&mut g2, &mut params, &permuted, false).unwrap();
        for (a, b) in base.iter().zip(g2.data(out)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn interpolation_identity_on_same_point_set() {
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.5, -0.25]).collect();
        let plan = plan_interpolation(&pts, &pts);
        let mut g = Graph::new();
        let feats = g
            .constant(vec![5, 2], (0..10).map(|v| v as f64 / 3.0).collect())
            .unwrap();
        let out = apply_interpolation(&mut g, &plan, feats).unwrap();
        for (a, b) in g.data(out).iter().zip(g.data(feats)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_source_dominates_interpolation() {
        let targets: Vec<[f64; 3]> = (0..4).map(|i| [i as f64, 1.0, 2.0]).collect();
        let sources = vec![[100.0, -50.0, 3.0]];
        let plan = plan_interpolation(&targets, &sources);
        let mut g = Graph::new();
        let feats = g.constant(vec![1, 3], vec![7.0, -1.0, 0.5]).unwrap();
        let out = apply_interpolation(&mut g, &plan, feats).unwrap();
        for row in g.data(out).chunks(3) {
            assert!((row[0] - 7.0).abs() < 1e-12);
            assert!((row[1] + 1.0).abs() < 1e-12);
            assert!((row[2] - 0.5).abs() < 1e-12);
        }
    }

    pub(crate) fn tiny_segmentation_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::segmentation_default(2);
        let cores = [24, 12, 6, 3];
        let ch = [8, 12, 16, 16];
        for (i, s) in spec.stages.iter_mut().enumerate() {
            s.core_count = cores[i];
            s.channels = ch[i];
            s.embed_dim = ch[i];
        }
        spec.decoder_channels = vec![16, 12, 8, 8];
        spec
    }

    fn tiny_labeled_sequence(seed: u64) -> PointCloudSequence {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 3u32;
        let per_frame = 20;
        let mut positions = Vec::new();
        let mut timestamps = Vec::new();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for t in 0..frames {
            for i in 0..per_frame {
                positions.push([
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]);
                timestamps.push(t);
                features.extend_from_slice(&[0.2, 0.4, 0.6]);
                labels.push((i % 2) as u32);
            }
        }
        PointCloudSequence::new(positions, timestamps, features, 3, Some(labels), frames).unwrap()
    }

    #[test]
    fn segmentation_rows_align_with_input_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let net = SegmentationNetwork::new(tiny_segmentation_spec(), &mut params, &mut rng).unwrap();
        let seq = tiny_labeled_sequence(2);
        let logits = net.segment(&mut params, &seq).unwrap();
        assert_eq!(logits.len(), seq.len() * 2);
        let again = net.segment(&mut params, &seq).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn decoder_conv_flag_changes_parameterization_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ParamSet::new();
        let mut spec = tiny_segmentation_spec();
        spec.decoder_conv = false;
        let net = SegmentationNetwork::new(spec, &mut params, &mut rng).unwrap();
        assert!(params.id_of("dec0.conv.conv.weight").is_none());
        let seq = tiny_labeled_sequence(3);
        let logits = net.segment(&mut params, &seq).unwrap();
        assert_eq!(logits.len(), seq.len() * 2);
    }

    #[test]
    fn parameter_count_is_a_pure_function_of_the_spec() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut params = ParamSet::new();
            ClassificationNetwork::new(tiny_classification_spec(4), &mut params, &mut rng).unwrap();
            params.trainable_count()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn spec_validation_rejects_bad_shapes() {
        let mut spec = tiny_classification_spec(4);
        spec.stages[1].core_count = spec.stages[0].core_count;
        assert!(matches!(spec.validate(), Err(NetError::InvalidSpec(_))));

        let mut spec = tiny_classification_spec(4);
        spec.stages.pop();
        assert!(matches!(spec.validate(), Err(NetError::InvalidSpec(_))));

        let mut spec = tiny_segmentation_spec();
        spec.decoder_channels.pop();
        assert!(matches!(spec.validate(), Err(NetError::InvalidSpec(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[-5.0]), 0);
    }
}

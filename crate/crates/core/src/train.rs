//! Training loops for both tasks, deterministic given the seeds.
//!
//! Geometry (sampling, anchors, neighbor groups) depends only on point
//! positions, so plans are built once per sequence and reused across
//! epochs. Checkpoint selection is best-by-validation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::PointCloudSequence;
use crate::metrics::{accuracy, intersection_over_union, IouReport};
use crate::network::{
    argmax, ClassPlan, ClassificationNetwork, NetError, NetworkSpec, SegPlan, SegmentationNetwork,
};
use crate::tensor::adam::AdamState;
use crate::tensor::graph::Graph;
use crate::tensor::nn::ParamSet;
use crate::synth::make_batches;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_period_steps: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    /// Stop once the validation metric reaches this value.
    pub target_metric: Option<f64>,
    /// Re-seed farthest point sampling per epoch during training.
    pub fps_augmentation: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            batch_size: 8,
            learning_rate: 0.001,
            decay_factor: 0.7,
            decay_period_steps: 200_000,
            init_seed: 1,
            shuffle_seed: 2,
            target_metric: None,
            fps_augmentation: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
    pub steps: u64,
    pub best_epoch: usize,
    pub best_val_metric: f64,
}

pub struct ClassificationRun {
    pub network: ClassificationNetwork,
    /// Best-by-validation parameters.
    pub params: ParamSet,
    pub history: TrainHistory,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Per-sequence class label (every point carries it).
pub fn sequence_label(seq: &PointCloudSequence) -> Option<u32> {
    seq.labels().map(|l| l[0])
}

/// Deterministic validation split by shuffled indices.
pub fn split_validation(
    mut seqs: Vec<PointCloudSequence>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<PointCloudSequence>, Vec<PointCloudSequence>) {
    let n = seqs.len();
    let val_count = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let order = make_batches(n, 1, seed).expect("non-empty dataset");
    let picked: Vec<usize> = order.into_iter().map(|b| b[0]).collect();
    let mut val_mask = vec![false; n];
    for &i in picked.iter().take(val_count) {
        val_mask[i] = true;
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, seq) in seqs.drain(..).enumerate() {
        if val_mask[i] {
            val.push(seq);
        } else {
            train.push(seq);
        }
    }
    (train, val)
}

pub fn train_classification(
    spec: &NetworkSpec,
    train: &[PointCloudSequence],
    val: &[PointCloudSequence],
    opts: &TrainOptions,
) -> Result<ClassificationRun, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.init_seed);
    let mut params = ParamSet::new();
    let network = ClassificationNetwork::new(spec.clone(), &mut params, &mut rng)?;

    let mut train_plans = Vec::with_capacity(train.len());
    for seq in train {
        train_plans.push(network.plan(seq)?);
    }
    let mut val_plans = Vec::with_capacity(val.len());
    for seq in val {
        val_plans.push(network.plan(seq)?);
    }
    let train_labels: Vec<usize> = train
        .iter()
        .map(|s| sequence_label(s).unwrap_or(0) as usize)
        .collect();
    let val_labels: Vec<u32> = val.iter().map(|s| sequence_label(s).unwrap_or(0)).collect();

    let mut adam = AdamState::new(opts.learning_rate, opts.decay_factor, opts.decay_period_steps);
    let mut history = TrainHistory {
        epoch_losses: Vec::new(),
        epochs_run: 0,
        steps: 0,
        best_epoch: 0,
        best_val_metric: f64::NEG_INFINITY,
    };
    let mut best_params = params.clone();

    for epoch in 0..opts.epochs {
        if opts.fps_augmentation {
            for (i, seq) in train.iter().enumerate() {
                let seed = (epoch * 7919 + i * 31 + 1) % seq.len();
                train_plans[i] = network.plan_with_seed(seq, seed)?;
            }
        }
        let batches = make_batches(train.len(), opts.batch_size, opts.shuffle_seed.wrapping_add(epoch as u64))
            .expect("training set is non-empty");
        let mut loss_sum = 0.0;
        for batch in &batches {
            // one merged forward per batch, so batch norm sees the batch
            let merged: Vec<&ClassPlan> = batch.iter().map(|&i| &train_plans[i]).collect();
            let merged = ClassPlan::merge(&merged);
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let mut g = Graph::new();
            let logits = network.forward(&mut g, &mut params, &merged, true)?;
            let loss = g.cross_entropy(logits, &labels)?;
            loss_sum += g.data(loss)[0] * batch.len() as f64;
            params.zero_grads();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut params);
            adam.step(&mut params)?;
            history.steps += 1;
        }
        history.epoch_losses.push(loss_sum / train.len() as f64);
        history.epochs_run = epoch + 1;

        let val_metric = classification_accuracy_with_plans(&network, &mut params, &val_plans, &val_labels)?;
        if val_metric > history.best_val_metric {
            history.best_val_metric = val_metric;
            history.best_epoch = epoch;
            best_params = params.clone();
        }
        if opts.target_metric.is_some_and(|t| val_metric >= t) {
            break;
        }
    }

    let mut params = best_params;
    let train_labels_u32: Vec<u32> = train_labels.iter().map(|&l| l as u32).collect();
    let train_plans_final: Vec<_> = train
        .iter()
        .map(|seq| network.plan(seq))
        .collect::<Result<_, _>>()?;
    let train_accuracy =
        classification_accuracy_with_plans(&network, &mut params, &train_plans_final, &train_labels_u32)?;
    let val_accuracy = classification_accuracy_with_plans(&network, &mut params, &val_plans, &val_labels)?;
    Ok(ClassificationRun {
        network,
        params,
        history,
        train_accuracy,
        val_accuracy,
    })
}

fn classification_accuracy_with_plans(
    network: &ClassificationNetwork,
    params: &mut ParamSet,
    plans: &[ClassPlan],
    labels: &[u32],
) -> Result<f64, NetError> {
    if plans.is_empty() {
        return Ok(0.0);
    }
    // inference is row-independent, so one merged pass matches the
    // per-sequence results exactly
    let refs: Vec<&ClassPlan> = plans.iter().collect();
    let merged = ClassPlan::merge(&refs);
    let classes = network.spec.class_count;
    let mut g = Graph::new();
    let logits = network.forward(&mut g, params, &merged, false)?;
    let predictions: Vec<u32> = g
        .data(logits)
        .chunks(classes)
        .map(|row| argmax(row) as u32)
        .collect();
    Ok(accuracy(&predictions, labels).expect("aligned predictions"))
}

/// Inference-mode accuracy over whole sequences.
pub fn eval_classification(
    network: &ClassificationNetwork,
    params: &mut ParamSet,
    seqs: &[PointCloudSequence],
) -> Result<(f64, Vec<u32>), NetError> {
    let mut predictions = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let logits = network.classify(params, seq)?;
        predictions.push(argmax(&logits) as u32);
    }
    let labels: Vec<u32> = seqs.iter().map(|s| sequence_label(s).unwrap_or(0)).collect();
    Ok((accuracy(&predictions, &labels).expect("aligned predictions"), predictions))
}

pub struct SegmentationRun {
    pub network: SegmentationNetwork,
    pub params: ParamSet,
    pub history: TrainHistory,
    pub train_iou: IouReport,
    pub val_iou: IouReport,
}

pub fn train_segmentation(
    spec: &NetworkSpec,
    train: &[PointCloudSequence],
    val: &[PointCloudSequence],
    opts: &TrainOptions,
) -> Result<SegmentationRun, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.init_seed);
    let mut params = ParamSet::new();
    let network = SegmentationNetwork::new(spec.clone(), &mut params, &mut rng)?;

    let mut train_plans = Vec::with_capacity(train.len());
    for seq in train {
        train_plans.push(network.plan(seq)?);
    }
    let mut val_plans = Vec::with_capacity(val.len());
    for seq in val {
        val_plans.push(network.plan(seq)?);
    }

    let mut adam = AdamState::new(opts.learning_rate, opts.decay_factor, opts.decay_period_steps);
    let mut history = TrainHistory {
        epoch_losses: Vec::new(),
        epochs_run: 0,
        steps: 0,
        best_epoch: 0,
        best_val_metric: f64::NEG_INFINITY,
    };
    let mut best_params = params.clone();

    for epoch in 0..opts.epochs {
        let batches = make_batches(train.len(), opts.batch_size, opts.shuffle_seed.wrapping_add(epoch as u64))
            .expect("training set is non-empty");
        let mut loss_sum = 0.0;
        for batch in &batches {
            let merged: Vec<&SegPlan> = batch.iter().map(|&i| &train_plans[i]).collect();
            let merged = SegPlan::merge(&merged);
            let mut labels: Vec<usize> = Vec::new();
            for &i in batch {
                labels.extend(train[i].labels().unwrap_or(&[]).iter().map(|&l| l as usize));
            }
            let mut g = Graph::new();
            let logits = network.forward(&mut g, &mut params, &merged, true)?;
            let loss = g.cross_entropy(logits, &labels)?;
            loss_sum += g.data(loss)[0] * batch.len() as f64;
            params.zero_grads();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut params);
            adam.step(&mut params)?;
            history.steps += 1;
        }
        history.epoch_losses.push(loss_sum / train.len() as f64);
        history.epochs_run = epoch + 1;

        let val_report = segmentation_iou_with_plans(&network, &mut params, &val_plans, val)?;
        if val_report.mean_iou > history.best_val_metric {
            history.best_val_metric = val_report.mean_iou;
            history.best_epoch = epoch;
            best_params = params.clone();
        }
        if opts.target_metric.is_some_and(|t| val_report.mean_iou >= t) {
            break;
        }
    }

    let mut params = best_params;
    let train_iou = segmentation_iou_with_plans(&network, &mut params, &train_plans, train)?;
    let val_iou = segmentation_iou_with_plans(&network, &mut params, &val_plans, val)?;
    Ok(SegmentationRun {
        network,
        params,
        history,
        train_iou,
        val_iou,
    })
}

fn segmentation_iou_with_plans(
    network: &SegmentationNetwork,
    params: &mut ParamSet,
    plans: &[SegPlan],
    seqs: &[PointCloudSequence],
) -> Result<IouReport, NetError> {
    let classes = network.spec.class_count;
    let refs: Vec<&SegPlan> = plans.iter().collect();
    let merged = SegPlan::merge(&refs);
    let mut g = Graph::new();
    let logits = network.forward(&mut g, params, &merged, false)?;
    let predictions: Vec<u32> = g
        .data(logits)
        .chunks(classes)
        .map(|row| argmax(row) as u32)
        .collect();
    let mut labels = Vec::new();
    for seq in seqs {
        labels.extend_from_slice(seq.labels().unwrap_or(&[]));
    }
    Ok(intersection_over_union(&predictions, &labels, classes).expect("aligned predictions"))
}

/// Inference-mode IoU pooled over all points of all sequences.
pub fn eval_segmentation(
    network: &SegmentationNetwork,
    params: &mut ParamSet,
    seqs: &[PointCloudSequence],
) -> Result<(IouReport, Vec<Vec<u32>>), NetError> {
    let classes = network.spec.class_count;
    let mut per_seq = Vec::with_capacity(seqs.len());
    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    for seq in seqs {
        let logits = network.segment(params, seq)?;
        let preds: Vec<u32> = logits.chunks(classes).map(|row| argmax(row) as u32).collect();
        predictions.extend_from_slice(&preds);
        labels.extend_from_slice(seq.labels().unwrap_or(&[]));
        per_seq.push(preds);
    }
    let report = intersection_over_union(&predictions, &labels, classes).expect("aligned predictions");
    Ok((report, per_seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_motion_classification, MotionSpec};

    fn tiny_dataset() -> (Vec<PointCloudSequence>, Vec<PointCloudSequence>) {
        let spec = MotionSpec {
            classes: 2,
            sequences_per_class: 6,
            frames: 4,
            points_per_frame: 24,
            step: 0.15,
            noise_sigma: 0.005,
            seed: 5,
        };
        let seqs = generate_motion_classification(&spec).unwrap();
        split_validation(seqs, 0.25, 9)
    }

    fn tiny_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::classification_default(2);
        let cores = [16, 8, 4];
        let ch = [6, 8, 10];
        for (i, s) in spec.stages.iter_mut().enumerate() {
            s.core_count = cores[i];
            s.channels = ch[i];
            s.embed_dim = ch[i];
        }
        spec.head_hidden = 8;
        spec
    }

    fn smoke_options() -> TrainOptions {
        TrainOptions {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.005,
            decay_factor: 0.7,
            decay_period_steps: 1000,
            init_seed: 3,
            shuffle_seed: 4,
            target_metric: None,
            fps_augmentation: false,
        }
    }

    #[test]
    fn one_epoch_smoke_run() {
        let (train, val) = tiny_dataset();
        let run = train_classification(&tiny_spec(), &train, &val, &smoke_options()).unwrap();
        assert_eq!(run.history.epochs_run, 1);
        assert_eq!(run.history.epoch_losses.len(), 1);
        assert!(run.history.epoch_losses[0].is_finite());
        assert!(run.history.steps > 0);
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let (train, val) = tiny_dataset();
        let opts = TrainOptions { epochs: 2, ..smoke_options() };
        let a = train_classification(&tiny_spec(), &train, &val, &opts).unwrap();
        let b = train_classification(&tiny_spec(), &train, &val, &opts).unwrap();
        assert_eq!(a.history.epoch_losses, b.history.epoch_losses);
        assert_eq!(a.train_accuracy.to_bits(), b.train_accuracy.to_bits());
        assert_eq!(a.val_accuracy.to_bits(), b.val_accuracy.to_bits());
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.tensor.data, pb.tensor.data);
        }
    }

    #[test]
    fn reported_metrics_match_a_fresh_eval() {
        let (train, val) = tiny_dataset();
        let opts = TrainOptions { epochs: 2, ..smoke_options() };
        let mut run = train_classification(&tiny_spec(), &train, &val, &opts).unwrap();
        let (fresh_train, _) = eval_classification(&run.network, &mut run.params, &train).unwrap();
        let (fresh_val, _) = eval_classification(&run.network, &mut run.params, &val).unwrap();
        assert_eq!(fresh_train.to_bits(), run.train_accuracy.to_bits());
        assert_eq!(fresh_val.to_bits(), run.val_accuracy.to_bits());
    }

    #[test]
    fn validation_split_is_seeded_and_disjoint() {
        let spec = MotionSpec {
            classes: 2,
            sequences_per_class: 10,
            frames: 2,
            points_per_frame: 8,
            step: 0.1,
            noise_sigma: 0.0,
            seed: 1,
        };
        let seqs = generate_motion_classification(&spec).unwrap();
        let (t1, v1) = split_validation(seqs.clone(), 0.2, 3);
        let (t2, v2) = split_validation(seqs, 0.2, 3);
        assert_eq!(t1.len(), 16);
        assert_eq!(v1.len(), 4);
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
    }
}

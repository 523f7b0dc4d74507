// scratch calibration run, not part of the deliverable
use std::time::Instant;

use asta3d_core::network::NetworkSpec;
use asta3d_core::synth::{generate_motion_classification, MotionSpec};
use asta3d_core::train::{train_classification, TrainOptions};

fn main() {
    let data_start = Instant::now();
    let train_spec = MotionSpec {
        classes: 4,
        sequences_per_class: 50,
        frames: 8,
        points_per_frame: 64,
        step: 0.12,
        noise_sigma: 0.01,
        seed: 7,
    };
    let test_spec = MotionSpec {
        sequences_per_class: 10,
        seed: 8,
        ..train_spec.clone()
    };
    let train = generate_motion_classification(&train_spec).unwrap();
    let test = generate_motion_classification(&test_spec).unwrap();
    println!("data: {:?}", data_start.elapsed());

    let mut spec = NetworkSpec::classification_default(4);
    let cores = [64, 16, 8];
    let ch = [8, 12, 16];
    for (i, s) in spec.stages.iter_mut().enumerate() {
        s.core_count = cores[i];
        s.channels = ch[i];
        s.embed_dim = ch[i];
    }
    spec.head_hidden = 32;

    let opts = TrainOptions {
        epochs: 50,
        batch_size: 8,
        learning_rate: 0.002,
        decay_factor: 0.7,
        decay_period_steps: 200_000,
        init_seed: 1,
        shuffle_seed: 2,
        target_metric: Some(0.99),
        fps_augmentation: false,
    };
    let t0 = Instant::now();
    let run = train_classification(&spec, &train, &test, &opts).unwrap();
    println!(
        "epochs {} steps {} time {:?} train_acc {:.4} test_acc {:.4}",
        run.history.epochs_run,
        run.history.steps,
        t0.elapsed(),
        run.train_accuracy,
        run.val_accuracy
    );
    println!("losses: {:?}", run.history.epoch_losses);
}

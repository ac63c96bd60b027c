//! Ignored-by-default timing probes used to size the acceptance experiments.
//! Run with: cargo test -p unitscope --test bench_probe -- --ignored --nocapture

use std::time::Instant;

use unitscope::data::{synthetic_images, SyntheticImageSpec};
use unitscope::nn::{evaluate, train, Model, TrainConfig};

#[test]
#[ignore]
fn mlp_epoch_timing() {
    let data = synthetic_images(&SyntheticImageSpec {
        n_per_class: 400,
        classes: 10,
        channels: 0,
        height: 28,
        width: 28,
        contrast: 0.6,
        noise: 0.35,
        seed: 1,
    })
    .unwrap();
    let mut model = Model::mlp(&[28, 28], &[512, 512], 10, None, 2).unwrap();
    let cfg = TrainConfig {
        lr: 0.1,
        batch_size: 128,
        epochs: 3,
        seed: 3,
        momentum: 0.0,
        dropout: None,
        batchnorm: false,
    };
    let t0 = Instant::now();
    let metrics = train(&mut model, &data, None, &cfg).unwrap();
    let train_time = t0.elapsed();
    let t1 = Instant::now();
    let eval = evaluate(&model, &data, None, None).unwrap();
    let eval_time = t1.elapsed();
    println!(
        "mlp 2x512, {} examples: {:.2?}/epoch train, {:.2?} eval, acc {:.3}, last train_acc {:.3}",
        data.len(),
        train_time / 3,
        eval_time,
        eval.accuracy,
        metrics.last().unwrap().train_acc
    );
}

#[test]
#[ignore]
fn convnet_epoch_timing() {
    let data = synthetic_images(&SyntheticImageSpec {
        n_per_class: 300,
        classes: 10,
        channels: 3,
        height: 32,
        width: 32,
        contrast: 0.6,
        noise: 0.35,
        seed: 4,
    })
    .unwrap();
    let mut model = Model::convnet(&[3, 32, 32], &[16, 16, 32, 32], &[1, 2, 2, 2], 10, true, 5).unwrap();
    let cfg = TrainConfig {
        lr: 0.05,
        batch_size: 64,
        epochs: 2,
        seed: 6,
        momentum: 0.0,
        dropout: None,
        batchnorm: true,
    };
    let t0 = Instant::now();
    let metrics = train(&mut model, &data, None, &cfg).unwrap();
    let train_time = t0.elapsed();
    let t1 = Instant::now();
    let eval = evaluate(&model, &data, None, None).unwrap();
    let eval_time = t1.elapsed();
    println!(
        "convnet 16-16-32-32 BN, {} examples: {:.2?}/epoch train, {:.2?} eval, acc {:.3}, last train_acc {:.3}",
        data.len(),
        train_time / 2,
        eval_time,
        eval.accuracy,
        metrics.last().unwrap().train_acc
    );
}

#[test]
#[ignore]
fn memorization_timing() {
    use unitscope::data::{corrupt_labels, CorruptionSpec};
    let data = synthetic_images(&SyntheticImageSpec {
        n_per_class: 400,
        classes: 10,
        channels: 0,
        height: 28,
        width: 28,
        contrast: 0.6,
        noise: 0.35,
        seed: 1,
    })
    .unwrap();
    let (corrupted, _) = corrupt_labels(
        &data,
        &CorruptionSpec {
            fraction: 1.0,
            seed: 2,
        },
    )
    .unwrap();
    for (lr, batch) in [(0.1, 64), (0.2, 64), (0.3, 128)] {
        let mut model = Model::mlp(&[28, 28], &[512, 512], 10, None, 2).unwrap();
        let cfg = TrainConfig {
            lr,
            batch_size: batch,
            epochs: 200,
            seed: 3,
            momentum: 0.0,
            dropout: None,
            batchnorm: false,
        };
        let t0 = Instant::now();
        let metrics = unitscope::nn::train_with_observer(
            &mut model,
            &corrupted,
            None,
            &cfg,
            |_, m| {
                if m.train_acc >= 0.995 {
                    unitscope::nn::TrainFlow::Stop
                } else {
                    unitscope::nn::TrainFlow::Continue
                }
            },
        )
        .unwrap();
        let last = metrics.last().unwrap();
        println!(
            "lr {lr} bs {batch}: {} epochs to train_acc {:.4} in {:.1?}",
            metrics.len(),
            last.train_acc,
            t0.elapsed()
        );
    }
}

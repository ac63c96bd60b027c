//! Scratch probe: memorization dynamics with sparse glyph data + momentum.
//! cargo test -p unitscope --test bench_probe2 -- --ignored --nocapture

use std::time::Instant;
use unitscope::data::{corrupt_labels, synthetic_images, CorruptionSpec, SyntheticImageSpec};
use unitscope::nn::{Model, TrainConfig, TrainFlow};

#[test]
#[ignore]
fn memorization_lr_scan() {
    let data = synthetic_images(&SyntheticImageSpec {
        n_per_class: 200,
        classes: 10,
        channels: 0,
        height: 28,
        width: 28,
        contrast: 0.9,
        noise: 0.25,
        seed: 1,
    })
    .unwrap();
    let (corrupted, _) = corrupt_labels(&data, &CorruptionSpec { fraction: 1.0, seed: 2 }).unwrap();
    for (lr, momentum, batch) in [(0.05, 0.9, 64usize), (0.1, 0.9, 64), (0.2, 0.0, 32)] {
        let mut model = Model::mlp(&[28, 28], &[512, 512], 10, None, 2).unwrap();
        let cfg = TrainConfig { lr, batch_size: batch, epochs: 250, seed: 3, momentum, dropout: None, batchnorm: false };
        let t0 = Instant::now();
        let result = unitscope::nn::train_with_observer(&mut model, &corrupted, None, &cfg, |_, m| {
            if m.epoch % 25 == 0 {
                println!("  lr {lr} mom {momentum} epoch {}: loss {:.4} acc {:.3}", m.epoch, m.train_loss, m.train_acc);
            }
            if m.train_acc >= 0.995 { TrainFlow::Stop } else { TrainFlow::Continue }
        });
        match result {
            Ok(metrics) => {
                let last = metrics.last().unwrap();
                println!("lr {lr} mom {momentum} bs {batch}: {} epochs -> acc {:.4} ({:.1?})", metrics.len(), last.train_acc, t0.elapsed());
            }
            Err(e) => println!("lr {lr} mom {momentum} bs {batch}: error {e}"),
        }
    }
}

#[test]
#[ignore]
fn true_label_speed() {
    let data = synthetic_images(&SyntheticImageSpec {
        n_per_class: 200,
        classes: 10,
        channels: 0,
        height: 28,
        width: 28,
        contrast: 0.9,
        noise: 0.25,
        seed: 1,
    })
    .unwrap();
    let mut model = Model::mlp(&[28, 28], &[512, 512], 10, None, 2).unwrap();
    let cfg = TrainConfig { lr: 0.05, batch_size: 64, epochs: 30, seed: 3, momentum: 0.9, dropout: None, batchnorm: false };
    let metrics = unitscope::nn::train_with_observer(&mut model, &data, None, &cfg, |_, m| {
        if m.train_acc >= 0.995 { TrainFlow::Stop } else { TrainFlow::Continue }
    }).unwrap();
    println!("true labels: {} epochs -> acc {:.4}", metrics.len(), metrics.last().unwrap().train_acc);
}

//! Scratch diagnostics (run with --ignored). Not part of the suite.

use tilefomo_core::dataset::{synth_generate, SynthConfig};
use tilefomo_core::detector::TinyGridNet;
use tilefomo_core::eval::prior_from_samples;
use tilefomo_core::pipeline::build_tile_dataset;
use tilefomo_core::training::{
    grid_cell_f1, train_with_monitor, LossKind, TrainConfig, TrainSample,
};

fn pos_neg(net: &TinyGridNet<f32>, tiles: &[TrainSample]) -> (f64, f64) {
    let mut pos = (0.0, 0usize);
    let mut neg = (0.0, 0usize);
    for t in tiles.iter().take(30) {
        let pred = net.forward(&t.tile).unwrap();
        for (p, &y) in pred.probs().iter().zip(t.target.values()) {
            if y != 0 {
                pos.0 += *p as f64;
                pos.1 += 1;
            } else {
                neg.0 += *p as f64;
                neg.1 += 1;
            }
        }
    }
    (pos.0 / pos.1.max(1) as f64, neg.0 / neg.1.max(1) as f64)
}

#[test]
#[ignore]
fn probe_training_dynamics() {
    let train_images = synth_generate(&SynthConfig {
        num_images: 13,
        rng_seed: 42,
        ..SynthConfig::default()
    })
    .unwrap();
    let val_images = synth_generate(&SynthConfig {
        num_images: 4,
        rng_seed: 4242,
        ..SynthConfig::default()
    })
    .unwrap();
    let prior = prior_from_samples(&train_images).unwrap();
    let res: u32 = std::env::var("PROBE_RES").ok().and_then(|v| v.parse().ok()).unwrap_or(96);
    let mut tiles = build_tile_dataset(&train_images, Some(&prior), Some(0.04), res, 8, 1).unwrap();
    tiles.truncate(200);
    let val_tiles = build_tile_dataset(&val_images, Some(&prior), Some(0.04), res, 8, 1).unwrap();
    println!("resolution {res}");
    let positive_tiles: Vec<TrainSample> = tiles
        .iter()
        .filter(|t| t.target.values().iter().any(|&v| v != 0))
        .cloned()
        .collect();
    println!("tiles {}, positive tiles {}", tiles.len(), positive_tiles.len());

    let dense_images = synth_generate(&SynthConfig {
        num_images: 13,
        min_objects: 25,
        max_objects: 40,
        min_center_separation: 72.0,
        rng_seed: 77,
        ..SynthConfig::default()
    })
    .unwrap();
    let dense_prior = prior_from_samples(&dense_images).unwrap();
    let dense_tiles: Vec<TrainSample> =
        build_tile_dataset(&dense_images, Some(&dense_prior), Some(0.04), 96, 8, 1)
            .unwrap()
            .into_iter()
            .filter(|t| t.target.values().iter().any(|&v| v != 0))
            .collect();
    println!("dense tiles {}", dense_tiles.len());

    for (tag, data, eps, batch, lr, momentum, epochs) in [
        ("all b16 eps=1e-3 e=30", &tiles, 1e-3, 16usize, 0.05, 0.9, 30usize),
        ("all b16 eps=1e-3 e=60", &tiles, 1e-3, 16, 0.05, 0.9, 60),
    ] {
        let cfg = TrainConfig {
            epochs,
            batch_size: batch,
            learning_rate: lr,
            momentum,
            loss_kind: LossKind::SoftF1,
            epsilon: eps,
            rng_seed: 42,
            ..TrainConfig::default()
        };
        let mut net = TinyGridNet::<f32>::new(1, cfg.rng_seed);
        for b in net.layers_mut().last_mut().unwrap().bias.iter_mut() {
            *b = -4.0;
        }
        println!("== {tag}");
        train_with_monitor(&mut net, data, &cfg, |epoch, loss, net| {
            if epoch % 10 == 9 || epoch == 0 {
                let (p, n) = pos_neg(net, data);
                println!("  epoch {epoch:3}: loss {loss:.4}, p|pos {p:.3}, p|neg {n:.4}");
            }
        })
        .unwrap();
        let f1 = grid_cell_f1(&net, &val_tiles, 0.5).unwrap();
        let (mut tp, mut fp, mut fnn) = (0u32, 0u32, 0u32);
        for t in &val_tiles {
            let pred = net.forward(&t.tile).unwrap();
            for (p, &y) in pred.probs().iter().zip(t.target.values()) {
                match (*p >= 0.5, y != 0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    _ => {}
                }
            }
        }
        println!("  -> val cell F1 {f1:.4} (tp {tp}, fp {fp}, fn {fnn})");
    }
}

#![allow(dead_code)]

use disc_core::classifier::{train, TrainConfig, TrainMode, TrainedBundle};
use disc_core::datasets::make_toy_dataset;

/// Small bundle trained for a handful of steps on 16px toy data.
pub fn quick_bundle(mode: TrainMode) -> TrainedBundle {
    let data = make_toy_dataset(30, 16, 1).unwrap();
    let cfg = TrainConfig {
        mode,
        epochs: 1,
        min_steps: 40,
        seed: 3,
        ..TrainConfig::default()
    };
    train(&data, &cfg).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

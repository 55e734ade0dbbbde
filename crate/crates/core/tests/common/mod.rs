#![allow(dead_code)]

use memadapt::data::synth::SynthConfig;
use memadapt::networks::NetworkSpec;
use memadapt::trainer::{DataConfig, TrainConfig, TrainMode};
use std::path::Path;

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        tile_size: 16,
        train_tiles: 8,
        val_tiles: 2,
        test_tiles: 2,
        ..SynthConfig::default()
    }
}

pub fn tiny_network() -> NetworkSpec {
    NetworkSpec {
        feature_channels: 8,
        discriminator_channels: vec![4, 8, 1],
        tile_size: 16,
        ..NetworkSpec::default()
    }
}

/// A configuration that trains in well under a second.
pub fn tiny(mode: TrainMode, seed: u64, iters: usize) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        total_iters: iters,
        tau_prime: Some(iters / 4),
        eval_every: 10,
        network: tiny_network(),
        data: DataConfig::Synthetic(tiny_synth()),
        ..TrainConfig::default()
    }
}

pub fn write_config(path: &Path, cfg: &TrainConfig) {
    std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

//! Compares the four training modes over a few seeds.
//!
//! `cargo run --example ablation -- [iterations]`

use memadapt::trainer::experiments::{ablate, group_stats};
use memadapt::trainer::{TrainConfig, TrainMode};

fn main() -> memadapt::Result<()> {
    let iters = std::env::args().nth(1).map_or(600, |s| s.parse().expect("iterations"));
    let base = TrainConfig {
        total_iters: iters,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let modes = [TrainMode::SourceOnly, TrainMode::Dfa, TrainMode::Idma, TrainMode::DfaIdma];
    let rows = ablate(&base, &modes, &[0, 1])?;
    for r in &rows {
        println!("{:<12} seed {}  mIoU {:.4}  OA {:.4}  {:.0}s", r.mode.name(), r.seed, r.miou, r.oa, r.seconds);
    }
    for (mode, (mean, std)) in group_stats(&rows, |r| r.mode.name(), |r| r.miou) {
        println!("{mode:<12} mean mIoU {:.2} +/- {:.2}", 100.0 * mean, 100.0 * std);
    }
    Ok(())
}

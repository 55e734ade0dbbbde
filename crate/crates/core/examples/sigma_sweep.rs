//! Target scores as a function of the entropy threshold.
//!
//! `cargo run --example sigma_sweep -- [iterations]`

use memadapt::trainer::experiments::{group_stats, sweep_sigma};
use memadapt::trainer::TrainConfig;

fn main() -> memadapt::Result<()> {
    let iters = std::env::args().nth(1).map_or(600, |s| s.parse().expect("iterations"));
    let base = TrainConfig {
        total_iters: iters,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let rows = sweep_sigma(&base, &[0.0, 0.5, 1.0], &[0, 1])?;
    for r in &rows {
        println!("sigma {:.2} seed {}  mIoU {:.4}  retained {:.1}%", r.sigma, r.seed, r.miou, 100.0 * r.retained.unwrap_or(0.0));
    }
    for (key, (mean, _)) in group_stats(&rows, |r| (r.sigma * 100.0) as u32, |r| r.miou) {
        println!("sigma {:.2}: mean mIoU {:.2}", key as f64 / 100.0, 100.0 * mean);
    }
    Ok(())
}

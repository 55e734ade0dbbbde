//! Trains one configuration on the built-in synthetic domains and reports target scores.
//!
//! `cargo run --example train -- [source_only|dfa|idma|dfa_idma] [iterations] [out_dir]`

use memadapt::trainer::{TrainConfig, TrainMode, Trainer};

fn main() -> memadapt::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let mode = TrainMode::parse(args.get(1).map_or("dfa_idma", String::as_str))?;
    let iters = args.get(2).map_or(Ok(1000), |s| s.parse()).expect("iterations");
    let cfg = TrainConfig {
        mode,
        total_iters: iters,
        eval_every: iters / 4,
        output_dir: args.get(3).map(Into::into),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg)?;
    println!("{} parameters, step 2 from iteration {}", trainer.model.param_count(), trainer.config.tau());
    let s = trainer.run()?;
    let last = trainer.log.last().expect("at least one iteration");
    println!("final losses: seg1 {:.3} seg2 {:.3} adv {:.3} d {:.3}", last.seg1, last.seg2, last.adv, last.d_loss);
    for e in &s.evals {
        println!("iteration {:>5}: val mIoU {:.4}", e.iteration, e.metrics.miou.unwrap_or(f64::NAN));
    }
    println!(
        "{}: target test mIoU {:.4} OA {:.4} in {:.0}s",
        mode.name(),
        s.test.miou.unwrap_or(f64::NAN),
        s.test.oa.unwrap_or(f64::NAN),
        s.seconds
    );
    if let Some(r) = s.mean_retained {
        println!("mean pseudo-label retention {:.1}%", 100.0 * r);
    }
    Ok(())
}

//! Loads a saved model and scores it on a domain/split, optionally writing entropy maps.
//!
//! `cargo run --example evaluate -- <checkpoint_dir> [source|target] [train|val|test]`
//! Without arguments a short run is trained into a temporary directory first.

use memadapt::data::{Domain, Split};
use memadapt::pseudo_label::{entropy_map, ProbMap};
use memadapt::tensor::Tape;
use memadapt::trainer::source::DataSource;
use memadapt::trainer::{load_model, TrainConfig, Trainer};

fn main() -> memadapt::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = match args.get(1) {
        Some(d) => d.into(),
        None => {
            let dir = std::env::temp_dir().join("memadapt_eval_demo");
            let cfg = TrainConfig {
                total_iters: 200,
                eval_every: 100,
                output_dir: Some(dir.clone()),
                ..TrainConfig::default()
            };
            Trainer::new(cfg)?.run()?;
            dir.join("final")
        }
    };
    let domain = Domain::parse(args.get(2).map_or("target", String::as_str))?;
    let split = Split::parse(args.get(3).map_or("test", String::as_str))?;

    let (model, meta) = load_model(&ckpt)?;
    let data = DataSource::new(&meta.config.data, meta.config.network.tile_size)?.load(domain, split, true)?;
    let m = model.evaluate(&data, meta.config.eval_batch)?.summary();
    println!("{} {} ({} tiles): mIoU {:.4} OA {:.4} mA {:.4}", domain.name(), split.name(), data.len(),
        m.miou.unwrap_or(f64::NAN), m.oa.unwrap_or(f64::NAN), m.ma.unwrap_or(f64::NAN));

    let (x, _) = memadapt::data::to_batch(&[&data.tiles[0]])?;
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    let logits = model.forward_logits(&mut tape, xv, memadapt::nn::Mode::Eval)?;
    let prob = tape.softmax(logits, 1)?;
    let e = entropy_map(&ProbMap::from_tensor(tape.value(prob))?[0]);
    let path = std::env::temp_dir().join("memadapt_entropy_0.pgm");
    memadapt::data::raster::write_pgm(&path, e.height, e.width, &e.to_gray())?;
    println!("entropy map of the first tile: {}", path.display());
    Ok(())
}

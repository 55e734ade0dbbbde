//! Writes a small two-domain synthetic tile dataset and prints its class balance.
//!
//! `cargo run --example generate_data -- [out_dir]`

use memadapt::data::raster::{load_split, write_synthetic};
use memadapt::data::synth::SynthConfig;
use memadapt::data::{Domain, Split, CLASS_NAMES};

fn main() -> memadapt::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("memadapt_tiles"));
    let cfg = SynthConfig {
        train_tiles: 40,
        val_tiles: 5,
        test_tiles: 10,
        ..SynthConfig::default()
    };
    let manifest = write_synthetic(&out, &cfg)?;
    println!("wrote {}", out.display());
    for domain in [Domain::Source, Domain::Target] {
        let train = load_split(&out, &manifest, domain, Split::Train, true)?;
        let freq = train.class_frequencies();
        let parts: Vec<String> = CLASS_NAMES
            .iter()
            .zip(&freq)
            .map(|(n, f)| format!("{n} {:.1}%", 100.0 * f))
            .collect();
        println!("{:<6} train ({} tiles): {}", domain.name(), train.len(), parts.join(", "));
    }
    Ok(())
}

//! Reads a prototype memory with per-pixel attention and fuses the result with the input features.

use memadapt::attention::AggregatorParams;
use memadapt::memory::PrototypeMemory;
use memadapt::nn::Mode;
use memadapt::tensor::{Tape, Tensor};
use rand::SeedableRng;

fn main() -> memadapt::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let channels = 8;
    let agg = AggregatorParams::new(channels, 0);
    let mut mem = PrototypeMemory::new(6, channels, 0.9, 0.9, 100);
    for k in [0, 2, 3, 5] {
        let row = Tensor::randn(&[channels], 1.0, &mut rng);
        mem.set_row(k, row.data());
    }

    let mut tape = Tape::inference();
    let fp = tape.constant(Tensor::randn(&[1, channels, 3, 3], 1.0, &mut rng));
    let out = agg.forward(&mut tape, fp, &mem, Mode::Eval)?;
    let aff = tape.value(out.affinity.expect("memory is non-empty"));
    println!("attending over classes {:?}", mem.initialized_classes());
    for (i, row) in aff.data().chunks(aff.dim(2)).take(3).enumerate() {
        let sum: f64 = row.iter().sum();
        println!("pixel {i}: {:?} (sum {sum:.12})", row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }
    println!("aggregated features {:?}", tape.shape(out.features));
    Ok(())
}

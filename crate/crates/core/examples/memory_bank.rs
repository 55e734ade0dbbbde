//! Class prototypes: lazy initialization, similarity-weighted updates and the momentum decay.

use memadapt::memory::PrototypeMemory;
use memadapt::tensor::Tensor;
use memadapt::VOID;
use rand::{Rng, SeedableRng};

fn main() -> memadapt::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let (classes, channels, total) = (4, 3, 1000);
    let mut mem = PrototypeMemory::new(classes, channels, 0.9, 0.9, total);

    for t in [0, 250, 500, 750, 1000] {
        println!("m({t:>4}) = {:.4}", mem.momentum_at(t));
    }

    // a 1x3x4x4 feature map where class 3 never appears
    let feat = Tensor::randn(&[1, channels, 4, 4], 1.0, &mut rng);
    let labels: Vec<u8> = (0..16).map(|i| if i == 0 { VOID } else { rng.gen_range(0..3) }).collect();
    for t in 0..3 {
        let s = mem.update(&feat, &labels, t * 400)?;
        println!(
            "update {t}: momentum {:.3}, initialized {:?}, updated {:?}",
            s.momentum, s.initialized, s.updated
        );
    }
    for k in 0..classes {
        if mem.is_initialized(k) {
            println!("prototype {k}: {:?}", mem.row(k).iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>());
        } else {
            println!("prototype {k}: empty");
        }
    }
    Ok(())
}

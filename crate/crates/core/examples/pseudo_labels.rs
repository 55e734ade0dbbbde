//! Entropy-filtered pseudo-labels at several thresholds.

use memadapt::pseudo_label::{entropy_map, pseudo_labels, FilterMode, ProbMap};
use rand::{Rng, SeedableRng};

fn main() -> memadapt::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let (h, w, k) = (16, 16, 6);
    let mut probs = Vec::with_capacity(h * w * k);
    for _ in 0..h * w {
        let sharp = rng.gen_range(0.0..12.0);
        let e: Vec<f64> = (0..k).map(|_| (sharp * rng.gen::<f64>()).exp()).collect();
        let z: f64 = e.iter().sum();
        probs.extend(e.iter().map(|v| v / z));
    }
    let map = ProbMap::new(h, w, k, probs)?;
    let e = entropy_map(&map);
    let mean = e.values.iter().sum::<f64>() / e.values.len() as f64;
    println!("mean normalized entropy {mean:.3}");
    for sigma in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let pl = pseudo_labels(&map, FilterMode::Entropy, sigma, 0.0);
        println!("sigma {sigma:.2}: kept {:>3} of {} pixels", pl.retained(), h * w);
    }
    let pl = pseudo_labels(&map, FilterMode::Probability, 0.0, 0.5);
    println!("max probability >= 0.5: kept {:>3} of {} pixels", pl.retained(), h * w);
    Ok(())
}

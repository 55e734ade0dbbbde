//! Reverse-mode gradients on a small program, checked against central differences.

use memadapt::tensor::{grad_check, Conv2dGeom, Tape, Tensor};
use rand::SeedableRng;

fn main() -> memadapt::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);

    // loss = mean(softmax(relu(conv(x, w)), channels) * log(sigmoid(x_sum)))
    let program = |tape: &mut Tape, x| {
        let w = tape.constant(w.clone());
        let y = tape.conv2d(x, w, None, Conv2dGeom::new(1, 1, 1))?;
        let y = tape.relu(y);
        let p = tape.softmax(y, 1)?;
        let s = tape.sigmoid(p);
        let l = tape.log(s);
        Ok(tape.mean(l))
    };

    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let loss = program(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let g = grads.get(xv).expect("input gradient");
    println!("loss = {:.6}", tape.value(loss).item());
    println!("dloss/dx[0..4] = {:?}", &g[..4]);

    let err = grad_check(program, &x, 1e-6)?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}

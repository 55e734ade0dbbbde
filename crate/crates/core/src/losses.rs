//! Segmentation, adversarial and discriminator objectives on the tape.

use crate::error::Result;
use crate::tensor::{Tape, Var};
use crate::VOID;
use serde::{Deserialize, Serialize};

/// Scalar loss values of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg1: f64,
    pub seg2: f64,
    pub adv: f64,
    pub d_loss: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.seg1, self.seg2, self.adv, self.d_loss, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Total segmentation loss over both classifiers.
    pub fn seg_total(&self) -> f64 {
        self.seg1 + self.seg2
    }
}

/// Mean cross-entropy over non-VOID pixels of `[N, C_K, H, W]` logits.
pub fn seg_ce_loss(tape: &mut Tape, logits: Var, gt: &[u8]) -> Result<Var> {
    tape.cross_entropy(logits, gt, VOID)
}

/// `-E[log sigmoid(d)]` on discriminator outputs for target predictions.
pub fn adv_loss_target(tape: &mut Tape, d_out: Var) -> Var {
    tape.bce_with_logits(d_out, 1.0)
}

/// `seg1 + lambda_adv * adv`.
pub fn total_g1_loss(tape: &mut Tape, seg1: Var, adv: Var, lambda_adv: f64) -> Result<Var> {
    let weighted = tape.scale(adv, lambda_adv);
    tape.add(seg1, weighted)
}

/// `-E[log sigmoid(d_src)] - E[log(1 - sigmoid(d_tgt))]`.
pub fn d_loss(tape: &mut Tape, d_src: Var, d_tgt: Var) -> Result<Var> {
    let a = tape.bce_with_logits(d_src, 1.0);
    let b = tape.bce_with_logits(d_tgt, 0.0);
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn ce_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[1, 6, 2, 2]));
        let l = seg_ce_loss(&mut tape, x, &[0, 1, 2, 5]).unwrap();
        assert!((scalar(&tape, l) - 6f64.ln()).abs() < 1e-12);
        assert!((scalar(&tape, l) - 1.7918).abs() < 1e-4);

        let mut strong = vec![0.0; 2 * 4];
        strong[0] = 50.0;
        strong[4 + 1] = 50.0;
        let y = tape.variable(Tensor::new(&[1, 2, 2, 2], strong).unwrap());
        let l = seg_ce_loss(&mut tape, y, &[0, 1, VOID, VOID]).unwrap();
        assert!(scalar(&tape, l) < 1e-20);
    }

    #[test]
    fn ce_random_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 3, 4, 4], 2.0, &mut rng);
        let gt: Vec<u8> = (0..16).map(|i| if i % 5 == 0 { VOID } else { rng.gen_range(0..3) }).collect();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let l = seg_ce_loss(&mut tape, v, &gt).unwrap();
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 0..16 {
            if gt[i] == VOID {
                continue;
            }
            let z: f64 = (0..3).map(|k| x.data()[k * 16 + i].exp()).sum();
            sum -= (x.data()[gt[i] as usize * 16 + i].exp() / z).ln();
            n += 1.0;
        }
        assert!((scalar(&tape, l) - sum / n).abs() < 1e-12);
    }

    #[test]
    fn ce_all_void_is_zero_without_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::ones(&[1, 2, 1, 2]));
        let l = seg_ce_loss(&mut tape, x, &[VOID, VOID]).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        assert!(!tape.requires_grad(l));
    }

    #[test]
    fn adversarial_examples() {
        let mut tape = Tape::new();
        let half = tape.variable(Tensor::zeros(&[1, 1, 2, 2]));
        let a = adv_loss_target(&mut tape, half);
        assert!((scalar(&tape, a) - 2f64.ln()).abs() < 1e-15);
        let sure = tape.variable(Tensor::full(&[1, 1, 1, 1], 40.0));
        let a = adv_loss_target(&mut tape, sure);
        assert!(scalar(&tape, a) < 1e-15);
        let q = tape.variable(Tensor::full(&[1, 1, 1, 1], logit(0.25)));
        let a = adv_loss_target(&mut tape, q);
        assert!((scalar(&tape, a) - 1.3863).abs() < 1e-4);
        assert!((scalar(&tape, a) + 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn g1_total_examples() {
        let mut tape = Tape::new();
        let cases = [((1.0, 0.5, 1.0), 1.5), ((0.7, 3.0, 0.0), 0.7), ((1.7918, 0.6931, 1.0), 2.4849)];
        for ((s, a, l), want) in cases {
            let sv = tape.constant(Tensor::scalar(s));
            let av = tape.constant(Tensor::scalar(a));
            let t = total_g1_loss(&mut tape, sv, av, l).unwrap();
            assert!((scalar(&tape, t) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn discriminator_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let d = d_loss(&mut tape, z, z).unwrap();
        assert!((scalar(&tape, d) - 4f64.ln()).abs() < 1e-15);
        let src = tape.constant(Tensor::full(&[1, 1, 1, 1], 40.0));
        let tgt = tape.constant(Tensor::full(&[1, 1, 1, 1], -40.0));
        let d = d_loss(&mut tape, src, tgt).unwrap();
        assert!(scalar(&tape, d) < 1e-15);
        let src = tape.constant(Tensor::full(&[1, 1, 1, 1], logit(0.8)));
        let tgt = tape.constant(Tensor::full(&[1, 1, 1, 1], logit(0.3)));
        let d = d_loss(&mut tape, src, tgt).unwrap();
        let want = -(0.8f64.ln()) - 0.7f64.ln();
        assert!((scalar(&tape, d) - want).abs() < 1e-12);
        assert!((scalar(&tape, d) - 0.5798).abs() < 1e-4);
    }

    #[test]
    fn ce_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 4, 3, 3], 1.5, &mut rng);
        let gt: Vec<u8> = (0..18).map(|i| if i == 4 { VOID } else { rng.gen_range(0..4) }).collect();
        let err = grad_check(|tape, v| seg_ce_loss(tape, v, &gt), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn bce_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 1, 2, 2], 2.0, &mut rng);
        let err = grad_check(
            |tape, v| {
                let a = adv_loss_target(tape, v);
                let half = tape.narrow(v, 0, 0, 1)?;
                let rest = tape.narrow(v, 0, 1, 1)?;
                let d = d_loss(tape, half, rest)?;
                tape.add(a, d)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn losses_invariant_under_pixel_permutation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[1, 3, 1, 6], 1.0, &mut rng);
            let gt: Vec<u8> = (0..6).map(|_| rng.gen_range(0..3)).collect();
            let perm = [4, 2, 0, 5, 1, 3];
            let mut px = vec![0.0; 18];
            for k in 0..3 {
                for (i, &j) in perm.iter().enumerate() {
                    px[k * 6 + i] = x.data()[k * 6 + j];
                }
            }
            let pg: Vec<u8> = perm.iter().map(|&j| gt[j]).collect();
            let mut tape = Tape::new();
            let a = tape.constant(x.clone());
            let b = tape.constant(Tensor::new(&[1, 3, 1, 6], px).unwrap());
            let la = seg_ce_loss(&mut tape, a, &gt).unwrap();
            let lb = seg_ce_loss(&mut tape, b, &pg).unwrap();
            prop_assert!((scalar(&tape, la) - scalar(&tape, lb)).abs() < 1e-12);
            prop_assert!(scalar(&tape, la) >= 0.0);
            let da = adv_loss_target(&mut tape, a);
            let db = adv_loss_target(&mut tape, b);
            prop_assert!((scalar(&tape, da) - scalar(&tape, db)).abs() < 1e-12);
        }
    }
}

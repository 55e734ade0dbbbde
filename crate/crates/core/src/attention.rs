//! Category attention: fuses memory prototypes into the current feature map.

use crate::error::{Error, Result};
use crate::memory::PrototypeMemory;
use crate::networks::init_rng;
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Mode, Module};
use crate::tensor::{Conv2dGeom, Param, Tape, Tensor, Var};

/// Projections and mapping layers of the aggregation module.
#[derive(Clone, Debug)]
pub struct AggregatorParams {
    pub q_proj: Conv2d,
    pub k_proj: Conv2d,
    pub v_proj: Conv2d,
    pub phi: ConvBnRelu,
    pub theta: ConvBnRelu,
}

/// Output of [`AggregatorParams::forward`]. `attended` is `S'` as `[N, C, H, W]`;
/// `affinity` is `[N, HW, K']` over initialized classes, absent when the memory is empty.
#[derive(Clone, Copy, Debug)]
pub struct Aggregated {
    pub features: Var,
    pub attended: Var,
    pub affinity: Option<Var>,
}

impl AggregatorParams {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = init_rng(seed, 5);
        let g = Conv2dGeom::default();
        let c = channels;
        Self {
            q_proj: Conv2d::new("attn.q", c, c, 1, g, true, &mut rng),
            k_proj: Conv2d::new("attn.k", c, c, 1, g, true, &mut rng),
            v_proj: Conv2d::new("attn.v", c, c, 1, g, true, &mut rng),
            phi: ConvBnRelu::new("attn.phi", c, c, 1, g, &mut rng),
            theta: ConvBnRelu::new("attn.theta", 2 * c, c, 1, g, &mut rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.q_proj.out_channels()
    }

    /// `F_T = theta(cat(phi(S'), F_p))` with `S' = softmax_k(Q K^T) V`.
    pub fn forward(&self, tape: &mut Tape, fp: Var, memory: &PrototypeMemory, mode: Mode) -> Result<Aggregated> {
        let s = tape.shape(fp).to_vec();
        let c = self.channels();
        if s.len() != 4 || s[1] != c || memory.channels() != c {
            return Err(Error::shape(
                "aggregate",
                format!(
                    "feature {s:?} and memory width {} must both have {c} channels",
                    memory.channels()
                ),
            ));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let classes = memory.initialized_classes();
        let (s_prime, affinity) = if classes.is_empty() {
            log::debug!("aggregation with empty memory; attention branch is zero");
            (tape.constant(Tensor::zeros(&[n, c, h, w])), None)
        } else {
            let k = classes.len();
            let mut m = vec![0.0; c * k];
            for (j, &class) in classes.iter().enumerate() {
                for (ch, &v) in memory.row(class).iter().enumerate() {
                    m[ch * k + j] = v;
                }
            }
            let mem = tape.constant(Tensor::new(&[1, c, k, 1], m)?);
            let key = self.k_proj.forward(tape, mem)?;
            let key = tape.reshape(key, &[c, k])?;
            let value = self.v_proj.forward(tape, mem)?;
            let value = tape.reshape(value, &[c, k])?;
            let value = tape.permute(value, &[1, 0])?;
            let q = self.q_proj.forward(tape, fp)?;
            let q = tape.reshape(q, &[n, c, h * w])?;
            let q = tape.permute(q, &[0, 2, 1])?;
            let logits = tape.matmul(q, key)?;
            let att = tape.softmax(logits, 2)?;
            let sp = tape.matmul(att, value)?;
            let sp = tape.permute(sp, &[0, 2, 1])?;
            (tape.reshape(sp, &[n, c, h, w])?, Some(att))
        };
        let mapped = self.phi.forward(tape, s_prime, mode)?;
        let cat = tape.concat(&[mapped, fp], 1)?;
        let features = self.theta.forward(tape, cat, mode)?;
        Ok(Aggregated {
            features,
            attended: s_prime,
            affinity,
        })
    }
}

impl Module for AggregatorParams {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.q_proj.params();
        p.extend(self.k_proj.params());
        p.extend(self.v_proj.params());
        p.extend(self.phi.params());
        p.extend(self.theta.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.q_proj.params_mut();
        p.extend(self.k_proj.params_mut());
        p.extend(self.v_proj.params_mut());
        p.extend(self.phi.params_mut());
        p.extend(self.theta.params_mut());
        p
    }
    fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        vec![&self.phi.bn, &self.theta.bn]
    }
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        vec![&mut self.phi.bn, &mut self.theta.bn]
    }
}

/// Plain affinity map: `q` is `[HW, C]`, `k` is `[C_K, C]`; returns `[HW, C_K]`
/// with a softmax over unmasked classes and exact zeros in masked columns.
pub fn affinity(q: &Tensor, k: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (hw, c) = match *q.shape() {
        [a, b] => (a, b),
        _ => return Err(Error::shape("affinity", format!("Q must be [HW, C], got {:?}", q.shape()))),
    };
    let kk = k.dim(0);
    if k.shape() != [kk, c] || mask.len() != kk {
        return Err(Error::shape(
            "affinity",
            format!("K {:?} / mask {} incompatible with Q {:?}", k.shape(), mask.len(), q.shape()),
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Invalid("affinity undefined: every class is masked".into()));
    }
    let mut out = vec![0.0; hw * kk];
    for i in 0..hw {
        let qi = &q.data()[i * c..(i + 1) * c];
        let logits: Vec<f64> = (0..kk)
            .map(|j| qi.iter().zip(&k.data()[j * c..(j + 1) * c]).map(|(a, b)| a * b).sum())
            .collect();
        let max = (0..kk).filter(|&j| mask[j]).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in (0..kk).filter(|&j| mask[j]) {
            out[i * kk + j] = (logits[j] - max).exp();
            z += out[i * kk + j];
        }
        out[i * kk..(i + 1) * kk].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(&[hw, kk], out)
}

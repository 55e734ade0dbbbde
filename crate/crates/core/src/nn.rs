//! Parameterized layers shared by the networks.

use crate::error::Result;
use crate::tensor::{BatchStats, BnMode, Conv2dGeom, Param, Tape, Tensor, Var};
use rand::Rng;

/// Whether batch-norm layers use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-average decay for batch-norm statistics.
pub const BN_DECAY: f64 = 0.9;

/// Anything holding trainable parameters and batch-norm state.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d>;
    fn batch_norms(&self) -> Vec<&BatchNorm2d>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Folds training-mode batch statistics recorded on `tape` into running averages.
    fn commit_batch_stats(&mut self, tape: &Tape) {
        let stats = tape.batch_stats();
        if stats.is_empty() {
            return;
        }
        for bn in self.batch_norms_mut() {
            bn.commit(stats);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub geom: Conv2dGeom,
}

impl Conv2d {
    /// He-initialized (fan-in) square convolution with zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: Conv2dGeom,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = Tensor::randn(&[cout, cin, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[cout]))),
            geom,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.geom)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        let bn_mode = match mode {
            Mode::Train => BnMode::Train { key: self.gamma.id() },
            Mode::Eval => BnMode::Eval {
                mean: &self.running_mean,
                var: &self.running_var,
            },
        };
        tape.batch_norm(x, g, b, bn_mode)
    }

    /// Applies every recorded batch observation for this layer, in order.
    pub fn commit(&mut self, stats: &[BatchStats]) {
        for s in stats.iter().filter(|s| s.key == self.gamma.id()) {
            for c in 0..self.running_mean.len() {
                self.running_mean[c] = BN_DECAY * self.running_mean[c] + (1.0 - BN_DECAY) * s.mean[c];
                self.running_var[c] = BN_DECAY * self.running_var[c] + (1.0 - BN_DECAY) * s.var[c];
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Convolution followed by batch-norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: Conv2dGeom,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, kernel, geom, true, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        Ok(tape.relu(y))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }
}

/// Stable content hash of a parameter set (names, shapes and exact bits).
pub fn params_fingerprint<'a>(params: impl IntoIterator<Item = &'a Param>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name().as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

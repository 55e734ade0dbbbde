//! Feature extractor F, classifiers C_1 / C_2 and the patch discriminator D.
//!
//! The extractor is a small residual network with overall stride 4 whose last
//! block trades further downsampling for dilation. Classifiers sum three
//! parallel dilated 3x3 convolutions (ASPP), refine with two conv-BN-ReLU
//! layers, project to class logits and interpolate back to tile resolution.
//! The discriminator is a stack of 4x4 stride-2 convolutions ending in one
//! channel of patch logits.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Mode, Module};
use crate::tensor::{Conv2dGeom, Param, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub feature_channels: usize,
    pub num_classes: usize,
    pub extractor_blocks: usize,
    pub final_block_dilation: usize,
    pub aspp_dilations: Vec<usize>,
    pub discriminator_channels: Vec<usize>,
    pub tile_size: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            feature_channels: 32,
            num_classes: 6,
            extractor_blocks: 4,
            final_block_dilation: 2,
            aspp_dilations: vec![1, 2, 3],
            discriminator_channels: vec![16, 32, 64, 128, 1],
            tile_size: 32,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("network spec: {m}")));
        if self.discriminator_channels.last() != Some(&1) {
            return bad("discriminator_channels must end in 1");
        }
        if self.aspp_dilations.len() != 3 {
            return bad("aspp_dilations must have exactly three entries");
        }
        if self.aspp_dilations.contains(&0) || self.final_block_dilation == 0 {
            return bad("dilations must be positive");
        }
        if self.extractor_blocks < 2 {
            return bad("extractor needs at least two (stride-2) blocks");
        }
        if self.feature_channels < 2 || self.num_classes < 2 || self.input_channels == 0 {
            return bad("channel and class counts too small");
        }
        if self.tile_size % 4 != 0 {
            return bad("tile_size must be divisible by 4");
        }
        Ok(())
    }

    /// Smallest tile edge the discriminator accepts.
    pub fn min_discriminator_input(&self) -> usize {
        1 << self.discriminator_channels.len()
    }
}

/// Deterministic per-network RNG derived from a seed and a stream label.
pub fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    fn new<R: Rng>(name: &str, cin: usize, cout: usize, stride: usize, dilation: usize, rng: &mut R) -> Self {
        let g1 = Conv2dGeom::new(stride, dilation, dilation);
        let g2 = Conv2dGeom::new(1, dilation, dilation);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(&format!("{name}.down"), cin, cout, 1, Conv2dGeom::new(stride, 0, 1), false, rng),
                BatchNorm2d::new(&format!("{name}.down_bn"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, g1, false, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, g2, false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h)?;
        let h = self.bn2.forward(tape, h, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, s, mode)?
            }
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.relu(y))
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        if let Some((c, b)) = &self.shortcut {
            p.extend(c.params());
            p.extend(b.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.shortcut {
            p.extend(c.params_mut());
            p.extend(b.params_mut());
        }
        p
    }

    fn bns(&self) -> Vec<&BatchNorm2d> {
        let mut v = vec![&self.bn1, &self.bn2];
        v.extend(self.shortcut.as_ref().map(|s| &s.1));
        v
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        v.extend(self.shortcut.as_mut().map(|s| &mut s.1));
        v
    }
}

/// Residual feature extractor with spatial stride 4.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    blocks: Vec<ResidualBlock>,
    in_channels: usize,
}

impl FeatureExtractor {
    /// Blocks use strides (2, 2, 1, ...) and the final block is dilated.
    /// The first block is half width.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = init_rng(seed, 1);
        let c = spec.feature_channels;
        let n = spec.extractor_blocks;
        let mut blocks = Vec::with_capacity(n);
        let mut cin = spec.input_channels;
        for i in 0..n {
            let cout = if i == 0 { (c / 2).max(1) } else { c };
            let stride = if i < 2 { 2 } else { 1 };
            let dilation = if i == n - 1 { spec.final_block_dilation } else { 1 };
            blocks.push(ResidualBlock::new(&format!("extractor.block{i}"), cin, cout, stride, dilation, &mut rng));
            cin = cout;
        }
        Self {
            blocks,
            in_channels: spec.input_channels,
        }
    }

    /// `[N, in_ch, H, W]` → `[N, C, H/4, W/4]`.
    pub fn forward(&self, tape: &mut Tape, image: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(image);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(
                "feature_extractor",
                format!("expected [N, {}, H, W], got {s:?}", self.in_channels),
            ));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::shape(
                "feature_extractor",
                format!("spatial extents {}x{} must be divisible by 4", s[2], s[3]),
            ));
        }
        let mut x = image;
        for b in &self.blocks {
            x = b.forward(tape, x, mode)?;
        }
        Ok(x)
    }
}

impl Module for FeatureExtractor {
    fn params(&self) -> Vec<&Param> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
    fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        self.blocks.iter().flat_map(|b| b.bns()).collect()
    }
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        self.blocks.iter_mut().flat_map(|b| b.bns_mut()).collect()
    }
}

/// Pixel classifier: ASPP, two conv-BN-ReLU layers, a linear 1x1 head, upsampling.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub aspp: Vec<Conv2d>,
    refine: [ConvBnRelu; 2],
    head: Conv2d,
}

impl Classifier {
    /// `stream` separates the initial weights of independently built classifiers.
    pub fn new(name: &str, spec: &NetworkSpec, seed: u64, stream: u64) -> Self {
        let mut rng = init_rng(seed, stream);
        let c = spec.feature_channels;
        let aspp = spec
            .aspp_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv2d::new(&format!("{name}.aspp{i}"), c, c, 3, Conv2dGeom::new(1, d, d), true, &mut rng))
            .collect();
        let refine = [
            ConvBnRelu::new(&format!("{name}.refine0"), c, c, 3, Conv2dGeom::new(1, 1, 1), &mut rng),
            ConvBnRelu::new(&format!("{name}.refine1"), c, c, 1, Conv2dGeom::default(), &mut rng),
        ];
        let head = Conv2d::new(&format!("{name}.head"), c, spec.num_classes, 1, Conv2dGeom::default(), true, &mut rng);
        Self { aspp, refine, head }
    }

    /// Sum of the parallel dilated branches.
    pub fn aspp_forward(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for branch in &self.aspp {
            let y = branch.forward(tape, feature)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        acc.ok_or_else(|| Error::Invalid("classifier without ASPP branches".into()))
    }

    /// `[N, C, h, w]` → logits `[N, C_K, H, W]` with `(H, W) = 4 (h, w)`.
    pub fn forward(&self, tape: &mut Tape, feature: Var, target_size: (usize, usize), mode: Mode) -> Result<Var> {
        let s = tape.shape(feature).to_vec();
        if s.len() != 4 || (target_size.0, target_size.1) != (4 * s[2], 4 * s[3]) {
            return Err(Error::shape(
                "classifier",
                format!("target size {target_size:?} is not 4x the feature extent of {s:?}"),
            ));
        }
        let mut x = self.aspp_forward(tape, feature)?;
        for layer in &self.refine {
            x = layer.forward(tape, x, mode)?;
        }
        let logits = self.head.forward(tape, x)?;
        tape.upsample_bilinear(logits, target_size)
    }
}

impl Module for Classifier {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.aspp.iter().flat_map(|c| c.params()).collect();
        p.extend(self.refine.iter().flat_map(|r| r.params()));
        p.extend(self.head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.aspp.iter_mut().flat_map(|c| c.params_mut()).collect();
        p.extend(self.refine.iter_mut().flat_map(|r| r.params_mut()));
        p.extend(self.head.params_mut());
        p
    }
    fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        self.refine.iter().map(|r| &r.bn).collect()
    }
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        self.refine.iter_mut().map(|r| &mut r.bn).collect()
    }
}

pub const DISCRIMINATOR_SLOPE: f64 = 0.2;

/// Fully convolutional patch discriminator over class-probability maps.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    in_channels: usize,
}

impl Discriminator {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = init_rng(seed, 4);
        let mut cin = spec.num_classes;
        let convs = spec
            .discriminator_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv2d::new(&format!("disc.conv{i}"), cin, cout, 4, Conv2dGeom::new(2, 1, 1), true, &mut rng);
                cin = cout;
                c
            })
            .collect();
        Self {
            convs,
            in_channels: spec.num_classes,
        }
    }

    /// `[N, C_K, H, W]` probabilities → `[N, 1, H/2^L, W/2^L]` patch logits.
    pub fn forward(&self, tape: &mut Tape, prob: Var) -> Result<Var> {
        let s = tape.shape(prob).to_vec();
        let min = 1usize << self.convs.len();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(
                "discriminator",
                format!("expected [N, {}, H, W], got {s:?}", self.in_channels),
            ));
        }
        if s[2] < min || s[3] < min {
            return Err(Error::shape(
                "discriminator",
                format!(
                    "input {}x{} too small for {} stride-2 layers; minimum is {min}x{min}",
                    s[2],
                    s[3],
                    self.convs.len()
                ),
            ));
        }
        let mut x = prob;
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(tape, x)?;
            if i != last {
                x = tape.leaky_relu(x, DISCRIMINATOR_SLOPE);
            }
        }
        Ok(x)
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
    fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        Vec::new()
    }
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use std::collections::HashSet;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            input_channels: 4,
            feature_channels: 4,
            num_classes: 3,
            discriminator_channels: vec![4, 4, 1],
            tile_size: 8,
            ..NetworkSpec::default()
        }
    }

    #[test]
    fn default_shapes() {
        let spec = NetworkSpec::default();
        let f = FeatureExtractor::new(&spec, 0);
        let c = Classifier::new("c1", &spec, 0, 2);
        let d = Discriminator::new(&spec, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(1)));
        let feat = f.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(feat), &[2, 32, 8, 8]);
        let logits = c.forward(&mut tape, feat, (32, 32), Mode::Train).unwrap();
        assert_eq!(tape.shape(logits), &[2, 6, 32, 32]);
        let prob = tape.softmax(logits, 1).unwrap();
        let out = d.forward(&mut tape, prob).unwrap();
        assert_eq!(tape.shape(out), &[2, 1, 1, 1]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let f = FeatureExtractor::new(&NetworkSpec::default(), 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 30, 32]));
        assert!(f.forward(&mut tape, x, Mode::Train).is_err());
    }

    #[test]
    fn zero_input_gives_finite_features() {
        let f = FeatureExtractor::new(&NetworkSpec::default(), 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let y = f.forward(&mut tape, x, Mode::Train).unwrap();
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn classifier_rejects_wrong_target_size() {
        let spec = NetworkSpec::default();
        let c = Classifier::new("c1", &spec, 0, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 32, 8, 8]));
        assert!(c.forward(&mut tape, x, (16, 16), Mode::Train).is_err());
    }

    #[test]
    fn aspp_with_identical_branches_is_three_times_one() {
        let spec = NetworkSpec {
            aspp_dilations: vec![1, 1, 1],
            feature_channels: 4,
            ..NetworkSpec::default()
        };
        let mut c = Classifier::new("c", &spec, 0, 2);
        let w = c.aspp[0].weight.value.clone();
        let b = Tensor::randn(&[4], 0.3, &mut rng(2));
        for branch in &mut c.aspp {
            branch.weight.value = w.clone();
            branch.bias.as_mut().unwrap().value = b.clone();
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng(3)));
        let all = c.aspp_forward(&mut tape, x).unwrap();
        let one = c.aspp[0].forward(&mut tape, x).unwrap();
        let three = tape.scale(one, 3.0);
        assert!(tape.value(all).max_abs_diff(tape.value(three)) < 1e-12);
    }

    #[test]
    fn discriminator_minimum_size() {
        let spec = NetworkSpec::default();
        let d = Discriminator::new(&spec, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 6, 16, 16], 1.0 / 6.0));
        let err = d.forward(&mut tape, x).unwrap_err().to_string();
        assert!(err.contains("minimum is 32x32"), "{err}");
    }

    #[test]
    fn discriminator_is_deterministic_on_identical_inputs() {
        let spec = NetworkSpec::default();
        let d = Discriminator::new(&spec, 9);
        let p = Tensor::randn(&[1, 6, 32, 32], 1.0, &mut rng(4));
        let mut tape = Tape::new();
        let a = tape.constant(p.clone());
        let a = tape.softmax(a, 1).unwrap();
        let b = tape.constant(p);
        let b = tape.softmax(b, 1).unwrap();
        let both = tape.concat(&[a, b], 0).unwrap();
        let out = d.forward(&mut tape, both).unwrap();
        let v = tape.value(out).data();
        assert_eq!(v[0].to_bits(), v[1].to_bits());
    }

    #[test]
    fn same_seed_same_params_and_disjoint_classifiers() {
        let spec = NetworkSpec::default();
        let a = FeatureExtractor::new(&spec, 11);
        let b = FeatureExtractor::new(&spec, 11);
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value);
        }
        let c1 = Classifier::new("c1", &spec, 11, 2);
        let c2 = Classifier::new("c2", &spec, 11, 3);
        let ids1: HashSet<_> = c1.params().iter().map(|p| p.id()).collect();
        let ids2: HashSet<_> = c2.params().iter().map(|p| p.id()).collect();
        assert!(ids1.is_disjoint(&ids2));
        assert_ne!(c1.aspp[0].weight.value, c2.aspp[0].weight.value);
        assert!(a.param_count() > 0 && c1.param_count() > 0);
    }

    #[test]
    fn grad_check_extractor_and_classifier() {
        let spec = small_spec();
        let f = FeatureExtractor::new(&spec, 1);
        let c = Classifier::new("c1", &spec, 1, 2);
        let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng(5));
        let r = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng(6));
        let err = grad_check(
            |tape, v| {
                let feat = f.forward(tape, v, Mode::Train)?;
                let logits = c.forward(tape, feat, (8, 8), Mode::Train)?;
                let w = tape.constant(r.clone());
                let y = tape.mul(logits, w)?;
                Ok(tape.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_discriminator_on_small_map() {
        let spec = small_spec();
        let d = Discriminator::new(&spec, 2);
        let logits = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng(7));
        let err = grad_check(
            |tape, v| {
                let p = tape.softmax(v, 1)?;
                let out = d.forward(tape, p)?;
                Ok(tape.sum(out))
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

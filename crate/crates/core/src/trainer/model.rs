//! The networks of one training mode, their persistent state and inference.

use super::config::{TrainConfig, TrainMode};
use crate::attention::AggregatorParams;
use crate::data::{to_batch, TileDataset};
use crate::error::{Error, Result};
use crate::memory::PrototypeMemory;
use crate::metrics::ConfusionMatrix;
use crate::networks::{Classifier, Discriminator, FeatureExtractor, NetworkSpec};
use crate::nn::{params_fingerprint, Mode, Module};
use crate::tensor::{Param, Tape, Tensor, Var};
use rayon::prelude::*;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct Model {
    pub mode: TrainMode,
    pub spec: NetworkSpec,
    pub f: FeatureExtractor,
    pub c1: Classifier,
    pub c2: Option<Classifier>,
    pub attn: Option<AggregatorParams>,
    pub d: Option<Discriminator>,
    pub memory: Option<PrototypeMemory>,
}

impl Model {
    /// Builds only the parts `mode` trains.
    pub fn new(cfg: &TrainConfig) -> Self {
        let spec = &cfg.network;
        let seed = cfg.seed;
        let idma = cfg.mode.has_memory();
        Self {
            mode: cfg.mode,
            spec: spec.clone(),
            f: FeatureExtractor::new(spec, seed),
            c1: Classifier::new("c1", spec, seed, 2),
            c2: idma.then(|| Classifier::new("c2", spec, seed, 3)),
            attn: idma.then(|| AggregatorParams::new(spec.feature_channels, seed)),
            d: cfg
                .mode
                .has_discriminator()
                .then(|| Discriminator::new(spec, seed)),
            memory: idma.then(|| {
                PrototypeMemory::new(
                    spec.num_classes,
                    spec.feature_channels,
                    cfg.m0,
                    cfg.p,
                    cfg.memory_horizon(),
                )
            }),
        }
    }

    fn modules(&self) -> Vec<&dyn Module> {
        let mut m: Vec<&dyn Module> = vec![&self.f, &self.c1];
        if let Some(c2) = &self.c2 {
            m.push(c2);
        }
        if let Some(a) = &self.attn {
            m.push(a);
        }
        if let Some(d) = &self.d {
            m.push(d);
        }
        m
    }

    fn modules_mut(&mut self) -> Vec<&mut dyn Module> {
        let mut m: Vec<&mut dyn Module> = vec![&mut self.f, &mut self.c1];
        if let Some(c2) = &mut self.c2 {
            m.push(c2);
        }
        if let Some(a) = &mut self.attn {
            m.push(a);
        }
        if let Some(d) = &mut self.d {
            m.push(d);
        }
        m
    }

    pub fn params(&self) -> Vec<&Param> {
        self.modules().into_iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.modules_mut().into_iter().flat_map(|m| m.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.modules().iter().map(|m| m.param_count()).sum()
    }

    /// Parameters of G_1 = (F, C1).
    pub fn g1_params(&self) -> Vec<&Param> {
        let mut p = self.f.params();
        p.extend(self.c1.params());
        p
    }

    pub fn g1_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.f.params_mut();
        p.extend(self.c1.params_mut());
        p
    }

    /// Parameters of G_2 = (F, A, C2); F is left out when `with_f` is false.
    pub fn g2_params_mut(&mut self, with_f: bool) -> Vec<&mut Param> {
        let mut p = if with_f { self.f.params_mut() } else { Vec::new() };
        if let Some(a) = &mut self.attn {
            p.extend(a.params_mut());
        }
        if let Some(c2) = &mut self.c2 {
            p.extend(c2.params_mut());
        }
        p
    }

    pub fn d_params(&self) -> Vec<&Param> {
        self.d.as_ref().map(|d| d.params()).unwrap_or_default()
    }

    pub fn g_fingerprint(&self) -> String {
        let mut p = self.g1_params();
        if let Some(a) = &self.attn {
            p.extend(a.params());
        }
        if let Some(c2) = &self.c2 {
            p.extend(c2.params());
        }
        params_fingerprint(p)
    }

    pub fn d_fingerprint(&self) -> String {
        params_fingerprint(self.d_params())
    }

    pub fn commit_batch_stats(&mut self, tape: &Tape) {
        for m in self.modules_mut() {
            m.commit_batch_stats(tape);
        }
    }

    /// Parameters, batch-norm running statistics and memory contents.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for m in self.modules() {
            for p in m.params() {
                out.push((p.name().to_string(), p.value.clone()));
            }
            for bn in m.batch_norms() {
                let n = bn.running_mean.len();
                let name = bn.gamma.name().trim_end_matches(".gamma");
                out.push((
                    format!("{name}.running_mean"),
                    Tensor::new(&[n], bn.running_mean.clone()).expect("bn shape"),
                ));
                out.push((
                    format!("{name}.running_var"),
                    Tensor::new(&[n], bn.running_var.clone()).expect("bn shape"),
                ));
            }
        }
        if let Some(mem) = &self.memory {
            out.extend(mem.to_tensors());
        }
        out
    }

    /// Restores everything written by [`Model::state_tensors`]; every entry must be present.
    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let get = |name: &str| {
            tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
        };
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = get(name)?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        for m in self.modules_mut() {
            for p in m.params_mut() {
                let shape = p.value.shape().to_vec();
                p.value = fetch(p.name(), &shape)?;
            }
            for bn in m.batch_norms_mut() {
                let n = bn.running_mean.len();
                let name = bn.gamma.name().trim_end_matches(".gamma").to_string();
                bn.running_mean = fetch(&format!("{name}.running_mean"), &[n])?.into_data();
                bn.running_var = fetch(&format!("{name}.running_var"), &[n])?.into_data();
            }
        }
        if let Some(mem) = &mut self.memory {
            mem.load_tensors(
                get("memory.values")?,
                get("memory.initialized")?,
                get("memory.schedule")?,
            )?;
        }
        Ok(())
    }

    /// Segmentation logits of the evaluated branch: C2 on aggregated features
    /// when the memory exists, otherwise C1.
    pub fn forward_logits(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let size = (s[2], s[3]);
        let feat = self.f.forward(tape, x, mode)?;
        match (&self.attn, &self.c2, &self.memory) {
            (Some(a), Some(c2), Some(mem)) => {
                let agg = a.forward(tape, feat, mem, mode)?;
                c2.forward(tape, agg.features, size, mode)
            }
            _ => self.c1.forward(tape, feat, size, mode),
        }
    }

    /// Per-pixel argmax in eval mode, flat `N*H*W`.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<u8>> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let logits = self.forward_logits(&mut tape, x, Mode::Eval)?;
        Ok(argmax_channels(tape.value(logits)))
    }

    pub fn evaluate(&self, data: &TileDataset, batch: usize) -> Result<ConfusionMatrix> {
        let k = self.spec.num_classes;
        let parts: Vec<Result<ConfusionMatrix>> = data
            .tiles
            .par_chunks(batch.max(1))
            .map(|chunk| {
                let refs: Vec<_> = chunk.iter().collect();
                let (x, gt) = to_batch(&refs)?;
                let pred = self.predict(&x)?;
                let mut cm = ConfusionMatrix::new(k);
                cm.accumulate(&pred, &gt)?;
                Ok(cm)
            })
            .collect();
        let mut cm = ConfusionMatrix::new(k);
        for p in parts {
            cm.merge(&p?)?;
        }
        Ok(cm)
    }
}

/// Argmax over axis 1 of `[N, K, H, W]`; ties resolve to the lowest class.
pub fn argmax_channels(t: &Tensor) -> Vec<u8> {
    let (n, k, hw) = (t.dim(0), t.dim(1), t.dim(2) * t.dim(3));
    let d = t.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for i in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + i] > d[(b * k + best) * hw + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            network: NetworkSpec {
                feature_channels: 4,
                num_classes: 3,
                discriminator_channels: vec![4, 4, 1],
                tile_size: 8,
                ..NetworkSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn parts_follow_mode() {
        let so = Model::new(&small(TrainMode::SourceOnly));
        assert!(so.c2.is_none() && so.attn.is_none() && so.d.is_none() && so.memory.is_none());
        let full = Model::new(&small(TrainMode::DfaIdma));
        assert!(full.c2.is_some() && full.attn.is_some() && full.d.is_some() && full.memory.is_some());
        let idma = Model::new(&small(TrainMode::Idma));
        assert!(idma.d.is_none() && idma.memory.is_some());
    }

    #[test]
    fn state_round_trip() {
        let cfg = small(TrainMode::DfaIdma);
        let mut a = Model::new(&cfg);
        a.memory.as_mut().unwrap().set_row(1, &[1.0, 2.0, 3.0, 4.0]);
        a.f.batch_norms_mut()[0].running_mean[0] = 0.5;
        let state: BTreeMap<_, _> = a.state_tensors().into_iter().collect();
        let mut b = Model::new(&TrainConfig { seed: 9, ..cfg });
        assert_ne!(a.g_fingerprint(), b.g_fingerprint());
        b.load_state(&state).unwrap();
        assert_eq!(a.g_fingerprint(), b.g_fingerprint());
        assert_eq!(a.d_fingerprint(), b.d_fingerprint());
        assert_eq!(b.f.batch_norms()[0].running_mean[0], 0.5);
        assert_eq!(b.memory.unwrap().row(1), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let cfg = small(TrainMode::Dfa);
        let mut state: BTreeMap<_, _> = Model::new(&cfg).state_tensors().into_iter().collect();
        state.remove("c1.head.weight");
        assert!(Model::new(&cfg).load_state(&state).is_err());
    }

    #[test]
    fn argmax_lowest_on_ties() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}

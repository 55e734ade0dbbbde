//! Training configuration (JSON, unknown keys rejected).

use crate::data::augment::{AffineAug, ColorAug};
use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::networks::NetworkSpec;
use crate::pseudo_label::FilterMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SourceOnly,
    Dfa,
    Idma,
    #[default]
    DfaIdma,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::SourceOnly, TrainMode::Dfa, TrainMode::Idma, TrainMode::DfaIdma];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::SourceOnly => "source_only",
            TrainMode::Dfa => "dfa",
            TrainMode::Idma => "idma",
            TrainMode::DfaIdma => "dfa_idma",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown mode {s:?}")))
    }

    pub fn has_discriminator(self) -> bool {
        matches!(self, TrainMode::Dfa | TrainMode::DfaIdma)
    }

    pub fn has_memory(self) -> bool {
        matches!(self, TrainMode::Idma | TrainMode::DfaIdma)
    }

    pub fn uses_target(self) -> bool {
        self != TrainMode::SourceOnly
    }
}

/// How the two branch updates share the feature extractor in step 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedFUpdates {
    /// Both the DFA and the IDMA update move F every iteration.
    #[default]
    Both,
    /// DFA moves F on even iterations, IDMA on odd ones.
    Alternate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated in memory from these parameters.
    Synthetic(SynthConfig),
    /// A tile-dataset directory with `manifest.json`.
    Directory(PathBuf),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub total_iters: usize,
    /// Step-1 length; `None` means `total_iters / 10`.
    pub tau_prime: Option<usize>,
    pub batch_size: usize,
    pub sigma: f64,
    pub filter_mode: FilterMode,
    pub prob_threshold: f64,
    pub lambda_adv: f64,
    pub m0: f64,
    pub p: f64,
    /// Forces the memory momentum to zero (rows are still initialized).
    pub freeze_memory: bool,
    pub g_lr: f64,
    pub g_momentum: f64,
    pub g_weight_decay: f64,
    pub d_lr: f64,
    pub d_betas: [f64; 2],
    /// Polynomial learning-rate decay exponent; constant rates when absent.
    pub lr_poly_power: Option<f64>,
    pub shared_f_updates: SharedFUpdates,
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Periodic checkpoint interval; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub network: NetworkSpec,
    pub data: DataConfig,
    pub augment: AffineAug,
    pub color_augment: ColorAug,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::DfaIdma,
            seed: 0,
            total_iters: 5000,
            tau_prime: None,
            batch_size: 2,
            sigma: 0.5,
            filter_mode: FilterMode::Entropy,
            prob_threshold: 0.25,
            lambda_adv: 1.0,
            m0: 0.9,
            p: 0.9,
            freeze_memory: false,
            g_lr: 0.01,
            g_momentum: 0.9,
            g_weight_decay: 1e-4,
            d_lr: 1e-4,
            d_betas: [0.9, 0.99],
            lr_poly_power: None,
            shared_f_updates: SharedFUpdates::Both,
            eval_every: 500,
            eval_batch: 16,
            checkpoint_every: 0,
            network: NetworkSpec::default(),
            data: DataConfig::default(),
            augment: AffineAug::default(),
            color_augment: ColorAug::default(),
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn tau(&self) -> usize {
        self.tau_prime.unwrap_or(self.total_iters / 10)
    }

    /// Iterations of step 2, the horizon of the memory momentum schedule.
    pub fn memory_horizon(&self) -> usize {
        self.total_iters - self.tau()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::Config { path: path.into(), msg });
        if self.tau() > self.total_iters {
            return bad("tau_prime", format!("{} exceeds total_iters {}", self.tau(), self.total_iters));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad("sigma", format!("{} outside [0, 1]", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.prob_threshold) {
            return bad("prob_threshold", format!("{} outside [0, 1]", self.prob_threshold));
        }
        if self.batch_size < 2 {
            return bad("batch_size", "batch-norm layers need at least 2 samples".into());
        }
        if self.eval_batch == 0 {
            return bad("eval_batch", "must be positive".into());
        }
        if !(self.g_lr > 0.0) || !(self.d_lr > 0.0) {
            return bad("g_lr", "learning rates must be positive".into());
        }
        self.network.validate().map_err(|e| Error::Config {
            path: "network".into(),
            msg: e.to_string(),
        })?;
        if let DataConfig::Synthetic(s) = &self.data {
            if s.tile_size != self.network.tile_size {
                return bad(
                    "data.synthetic.tile_size",
                    format!("{} differs from network.tile_size {}", s.tile_size, self.network.tile_size),
                );
            }
        }
        if self.mode.has_discriminator() && self.network.tile_size < self.network.min_discriminator_input() {
            return bad(
                "network.tile_size",
                format!(
                    "{} is below the discriminator minimum {}",
                    self.network.tile_size,
                    self.network.min_discriminator_input()
                ),
            );
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: format!("{origin}:{}", e.path()),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// SHA-256 of the canonical JSON with the output location removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

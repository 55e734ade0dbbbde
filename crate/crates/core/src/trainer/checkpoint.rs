//! Checkpoint directories: `checkpoint.json` plus a tensor manifest and blob.

use super::config::TrainConfig;
use crate::data::EpochSampler;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::tensor::io::{load_tensors, save_tensors, Dtype};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT: &str = "memadapt-checkpoint/1";
const META: &str = "checkpoint.json";
const TENSORS: &str = "tensors.json";

/// Exact ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub iteration: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    /// Completed training iterations.
    pub iteration: usize,
    pub config_hash: String,
    pub config: TrainConfig,
    pub rng: RngState,
    pub source_sampler: EpochSampler,
    pub target_sampler: EpochSampler,
    pub dtype: Dtype,
    pub evals: Vec<EvalRecord>,
    /// Validation result of the state stored here, when it was evaluated.
    pub val_metrics: Option<Metrics>,
}

pub fn save(dir: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_tensors(&dir.join(TENSORS), tensors, meta.dtype)?;
    let path = dir.join(META);
    std::fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let path = dir.join(META);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let meta: CheckpointMeta = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: format!("{}:{}", path.display(), e.path()),
        msg: e.inner().to_string(),
    })?;
    if meta.format != FORMAT {
        return Err(Error::Checkpoint(format!("{}: unsupported format {:?}", path.display(), meta.format)));
    }
    if meta.config.hash() != meta.config_hash {
        return Err(Error::Checkpoint(format!(
            "{}: stored config does not match its hash",
            path.display()
        )));
    }
    let tensors = load_tensors(&dir.join(TENSORS))?.into_iter().collect();
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(11);
        for _ in 0..37 {
            rng.next_u32();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        for _ in 0..100 {
            assert_eq!(rng.next_u64(), back.next_u64());
        }
    }
}

//! Mode ablation and sigma sweep over several seeds.

use super::config::{TrainConfig, TrainMode};
use super::{RunSummary, Trainer};
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: TrainMode,
    pub seed: u64,
    pub miou: f64,
    pub oa: f64,
    pub ma: f64,
    pub best_val_miou: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaRow {
    pub sigma: f64,
    pub seed: u64,
    pub miou: f64,
    pub oa: f64,
    pub ma: f64,
    /// Mean fraction of target pixels kept by the filter.
    pub retained: Option<f64>,
}

fn run_one(cfg: TrainConfig) -> Result<RunSummary> {
    let mut t = Trainer::new(cfg)?;
    t.run()
}

fn scores(s: &RunSummary) -> Result<(f64, f64, f64)> {
    match (s.test.miou, s.test.oa, s.test.ma) {
        (Some(m), Some(o), Some(a)) => Ok((m, o, a)),
        _ => Err(Error::Invalid("test split produced no countable pixels".into())),
    }
}

fn run_dir(base: &TrainConfig, name: String) -> Option<std::path::PathBuf> {
    base.output_dir.as_ref().map(|d| d.join(name))
}

/// Trains every `(mode, seed)` pair; rows come back in input order.
pub fn ablate(base: &TrainConfig, modes: &[TrainMode], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(TrainMode, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(mode, seed)| {
            let cfg = TrainConfig {
                mode,
                seed,
                output_dir: run_dir(base, format!("{}_seed{seed}", mode.name())),
                ..base.clone()
            };
            let s = run_one(cfg)?;
            let (miou, oa, ma) = scores(&s)?;
            log::info!("{} seed {seed}: target test mIoU {miou:.4}", mode.name());
            Ok(AblationRow {
                mode,
                seed,
                miou,
                oa,
                ma,
                best_val_miou: s.best.and_then(|b| b.metrics.miou),
                seconds: s.seconds,
            })
        })
        .collect()
}

/// Trains the configured mode at each sigma and seed with entropy filtering.
pub fn sweep_sigma(base: &TrainConfig, sigmas: &[f64], seeds: &[u64]) -> Result<Vec<SigmaRow>> {
    let jobs: Vec<(f64, u64)> = sigmas
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    jobs.into_par_iter()
        .map(|(sigma, seed)| {
            let cfg = TrainConfig {
                sigma,
                seed,
                filter_mode: crate::pseudo_label::FilterMode::Entropy,
                output_dir: run_dir(base, format!("sigma{sigma}_seed{seed}")),
                ..base.clone()
            };
            cfg.validate()?;
            let s = run_one(cfg)?;
            let (miou, oa, ma) = scores(&s)?;
            log::info!("sigma {sigma} seed {seed}: target test mIoU {miou:.4}");
            Ok(SigmaRow {
                sigma,
                seed,
                miou,
                oa,
                ma,
                retained: s.mean_retained,
            })
        })
        .collect()
}

/// Mean and sample standard deviation of `value` grouped by `key`.
pub fn group_stats<T, K: Ord>(rows: &[T], key: impl Fn(&T) -> K, value: impl Fn(&T) -> f64) -> BTreeMap<K, (f64, f64)> {
    let mut groups: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(value(r));
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (k, (mean, var.sqrt()))
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_stats_mean_and_std() {
        let rows = [("a", 1.0), ("a", 3.0), ("b", 5.0)];
        let g = group_stats(&rows, |r| r.0, |r| r.1);
        assert_eq!(g["a"], (2.0, 2f64.sqrt()));
        assert_eq!(g["b"], (5.0, 0.0));
    }
}

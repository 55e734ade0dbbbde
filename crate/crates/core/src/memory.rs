//! Classwise prototype memory with similarity-weighted moving-average updates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::VOID;

/// Per-class feature prototypes `C_K x C` plus initialization flags and the
/// momentum schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMemory {
    values: Vec<f64>,
    initialized: Vec<bool>,
    num_classes: usize,
    channels: usize,
    pub m0: f64,
    pub p: f64,
    pub total_iters: usize,
}

/// What one update did, per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateSummary {
    pub momentum: f64,
    pub initialized: Vec<usize>,
    pub updated: Vec<usize>,
}

impl PrototypeMemory {
    pub fn new(num_classes: usize, channels: usize, m0: f64, p: f64, total_iters: usize) -> Self {
        Self {
            values: vec![0.0; num_classes * channels],
            initialized: vec![false; num_classes],
            num_classes,
            channels,
            m0,
            p,
            total_iters,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.values[class * self.channels..(class + 1) * self.channels]
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    pub fn initialized_flags(&self) -> &[bool] {
        &self.initialized
    }

    pub fn initialized_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&k| self.initialized[k]).collect()
    }

    /// Overwrites a row and marks it initialized.
    pub fn set_row(&mut self, class: usize, row: &[f64]) {
        assert_eq!(row.len(), self.channels);
        self.values[class * self.channels..(class + 1) * self.channels].copy_from_slice(row);
        self.initialized[class] = true;
    }

    /// `m_t = (1 - t/T)^p (m0 - m0/100) + m0/100`, with `t` clamped to `[0, T]`.
    pub fn momentum_at(&self, t: usize) -> f64 {
        momentum_at(t, self.total_iters, self.m0, self.p)
    }

    /// Sets each present class row to the mean feature of its pixels.
    ///
    /// `feature` is `[N, C, h, w]` and `labels` holds `N*h*w` entries at feature resolution.
    pub fn init_from_features(&mut self, feature: &Tensor, labels: &[u8]) -> Result<Vec<usize>> {
        let reps = class_representations(feature, labels, self.num_classes)?;
        let mut done = Vec::new();
        for (k, rows) in reps.iter().enumerate() {
            if !rows.is_empty() {
                self.set_row(k, &mean_rows(rows, self.channels));
                done.push(k);
            }
        }
        Ok(done)
    }

    /// Moving-average update at iteration `t` of the memory schedule.
    pub fn update(&mut self, feature: &Tensor, labels: &[u8], t: usize) -> Result<UpdateSummary> {
        let m = self.momentum_at(t);
        self.update_with_momentum(feature, labels, m)
    }

    /// Several (feature, labels) pairs pooled into one update.
    pub fn update_pooled(&mut self, parts: &[(&Tensor, &[u8])], m: f64) -> Result<UpdateSummary> {
        let mut reps: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.num_classes];
        for (feature, labels) in parts {
            for (k, rows) in class_representations(feature, labels, self.num_classes)?
                .into_iter()
                .enumerate()
            {
                reps[k].extend(rows);
            }
        }
        Ok(self.apply(&reps, m))
    }

    pub fn update_with_momentum(&mut self, feature: &Tensor, labels: &[u8], m: f64) -> Result<UpdateSummary> {
        self.update_pooled(&[(feature, labels)], m)
    }

    fn apply(&mut self, reps: &[Vec<Vec<f64>>], m: f64) -> UpdateSummary {
        let mut summary = UpdateSummary {
            momentum: m,
            ..Default::default()
        };
        for (k, rows) in reps.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            if !self.initialized[k] {
                self.set_row(k, &mean_rows(rows, self.channels));
                summary.initialized.push(k);
                continue;
            }
            let s = cosine_similarity(rows, self.row(k));
            let r = pooled_representation(rows, &s);
            let c = self.channels;
            for (v, r) in self.values[k * c..(k + 1) * c].iter_mut().zip(&r) {
                *v = (1.0 - m) * *v + m * r;
            }
            summary.updated.push(k);
        }
        summary
    }

    /// Serializable state: values `[C_K, C]` and flags `[C_K]` (1.0 / 0.0).
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let flags = self.initialized.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let sched = vec![self.m0, self.p, self.total_iters as f64];
        vec![
            (
                "memory.values".into(),
                Tensor::new(&[self.num_classes, self.channels], self.values.clone()).expect("memory shape"),
            ),
            (
                "memory.initialized".into(),
                Tensor::new(&[self.num_classes], flags).expect("memory shape"),
            ),
            ("memory.schedule".into(), Tensor::new(&[3], sched).expect("memory shape")),
        ]
    }

    pub fn load_tensors(&mut self, values: &Tensor, flags: &Tensor, schedule: &Tensor) -> Result<()> {
        if values.shape() != [self.num_classes, self.channels] || flags.shape() != [self.num_classes] {
            return Err(Error::Checkpoint(format!(
                "memory shape {:?} does not match {}x{}",
                values.shape(),
                self.num_classes,
                self.channels
            )));
        }
        self.values = values.data().to_vec();
        self.initialized = flags.data().iter().map(|&f| f != 0.0).collect();
        if let [m0, p, t] = schedule.data() {
            self.m0 = *m0;
            self.p = *p;
            self.total_iters = *t as usize;
        }
        Ok(())
    }
}

pub fn momentum_at(t: usize, total: usize, m0: f64, p: f64) -> f64 {
    let t = if t > total {
        log::warn!("momentum requested at t={t} beyond T={total}; clamped");
        total
    } else {
        t
    };
    let frac = if total == 0 { 1.0 } else { t as f64 / total as f64 };
    (1.0 - frac).powf(p) * (m0 - m0 / 100.0) + m0 / 100.0
}

/// Majority vote per `factor x factor` cell of an `[N, H, W]` label batch.
/// VOID does not vote; ties and all-VOID cells become VOID.
pub fn downsample_labels(labels: &[u8], n: usize, h: usize, w: usize, factor: usize, num_classes: usize) -> Vec<u8> {
    assert_eq!(labels.len(), n * h * w);
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![VOID; n * oh * ow];
    let mut counts = vec![0usize; num_classes];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                counts.iter_mut().for_each(|c| *c = 0);
                for dy in 0..factor {
                    let row = &labels[(b * h + oy * factor + dy) * w + ox * factor..][..factor];
                    for &l in row {
                        if (l as usize) < num_classes {
                            counts[l as usize] += 1;
                        }
                    }
                }
                let best = *counts.iter().max().unwrap_or(&0);
                if best > 0 && counts.iter().filter(|&&c| c == best).count() == 1 {
                    out[(b * oh + oy) * ow + ox] = counts.iter().position(|&c| c == best).unwrap() as u8;
                }
            }
        }
    }
    out
}

/// Feature rows grouped by label: entry `k` holds the `C`-vectors of every pixel labelled `k`.
pub fn class_representations(feature: &Tensor, labels: &[u8], num_classes: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let s = feature.shape();
    let (n, c, hw) = match *s {
        [c, h, w] => (1, c, h * w),
        [n, c, h, w] => (n, c, h * w),
        _ => return Err(Error::shape("class_representations", format!("feature must be [N, C, h, w], got {s:?}"))),
    };
    if labels.len() != n * hw {
        return Err(Error::shape(
            "class_representations",
            format!("{} labels for {} feature positions", labels.len(), n * hw),
        ));
    }
    let data = feature.data();
    let mut reps = vec![Vec::new(); num_classes];
    for b in 0..n {
        for i in 0..hw {
            let l = labels[b * hw + i];
            if l == VOID {
                continue;
            }
            if l as usize >= num_classes {
                return Err(Error::Invalid(format!("label {l} outside {num_classes} classes")));
            }
            let row = (0..c).map(|ch| data[(b * c + ch) * hw + i]).collect();
            reps[l as usize].push(row);
        }
    }
    Ok(reps)
}

const NORM_EPS: f64 = 1e-12;

/// Cosine similarity of each row with `m`; zero-norm pairs give 0.
pub fn cosine_similarity(rows: &[Vec<f64>], m: &[f64]) -> Vec<f64> {
    let mn = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    rows.iter()
        .map(|r| {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn < NORM_EPS || mn < NORM_EPS {
                log::debug!("cosine similarity with a zero-norm vector set to 0");
                return 0.0;
            }
            let dot: f64 = r.iter().zip(m).map(|(a, b)| a * b).sum();
            (dot / (rn * mn)).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Rows weighted by `(1 - S_i) / sum_j (1 - S_j)`; uniform when every `S_i` is 1.
pub fn pooled_representation(rows: &[Vec<f64>], s: &[f64]) -> Vec<f64> {
    assert_eq!(rows.len(), s.len());
    assert!(!rows.is_empty());
    let c = rows[0].len();
    let denom: f64 = s.iter().map(|v| 1.0 - v).sum();
    if denom == 0.0 {
        log::debug!("all similarities equal 1; pooling falls back to the mean");
        return mean_rows(rows, c);
    }
    let mut out = vec![0.0; c];
    for (r, si) in rows.iter().zip(s) {
        let w = (1.0 - si) / denom;
        for (o, v) in out.iter_mut().zip(r) {
            *o += w * v;
        }
    }
    out
}

fn mean_rows(rows: &[Vec<f64>], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

//! Target pseudo labels: argmax, normalized entropy and confidence filters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::VOID;
use serde::{Deserialize, Serialize};

/// Per-pixel class probabilities stored pixel-major (`H x W x C_K`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    #[default]
    Entropy,
    Probability,
    None,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * classes || classes == 0 {
            return Err(Error::shape(
                "prob_map",
                format!("{} values for {height}x{width}x{classes}", probs.len()),
            ));
        }
        for (i, px) in probs.chunks(classes).enumerate() {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("pixel {i} is not a probability vector (sum {sum})")));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            probs,
        })
    }

    /// Splits an `[N, C_K, H, W]` probability tensor into one map per image.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let [n, k, h, w] = *t.shape() else {
            return Err(Error::shape("prob_map", format!("expected [N, C_K, H, W], got {:?}", t.shape())));
        };
        let d = t.data();
        (0..n)
            .map(|b| {
                let mut probs = vec![0.0; h * w * k];
                for c in 0..k {
                    for i in 0..h * w {
                        probs[i * k + c] = d[(b * k + c) * h * w + i];
                    }
                }
                Self::new(h, w, k, probs)
            })
            .collect()
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.classes)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("label_map", format!("{} labels for {height}x{width}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != VOID && l as usize >= classes) {
            return Err(Error::Invalid(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn retained(&self) -> usize {
        self.labels.iter().filter(|&&l| l != VOID).count()
    }
}

impl EntropyMap {
    /// 8-bit rendering, `round(255 E)`.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values.iter().map(|e| (255.0 * e).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax_label(prob: &ProbMap) -> LabelMap {
    let labels = prob
        .pixels()
        .map(|px| {
            let mut best = 0;
            for (k, &p) in px.iter().enumerate() {
                if p > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        height: prob.height,
        width: prob.width,
        labels,
    }
}

/// Pixel entropy of a probability vector divided by `ln C_K`, with `0 ln 0 = 0`.
pub fn normalized_entropy(px: &[f64]) -> f64 {
    if px.len() < 2 {
        return 0.0;
    }
    if px.iter().all(|&p| p == px[0]) {
        return 1.0;
    }
    let h: f64 = px.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    (h / (px.len() as f64).ln()).clamp(0.0, 1.0)
}

pub fn entropy_map(prob: &ProbMap) -> EntropyMap {
    EntropyMap {
        height: prob.height,
        width: prob.width,
        values: prob.pixels().map(normalized_entropy).collect(),
    }
}

/// Keeps labels whose entropy is at most `sigma`.
pub fn entropy_filter(labels: &LabelMap, entropy: &EntropyMap, sigma: f64) -> LabelMap {
    assert_eq!(labels.labels.len(), entropy.values.len());
    LabelMap {
        height: labels.height,
        width: labels.width,
        labels: labels
            .labels
            .iter()
            .zip(&entropy.values)
            .map(|(&l, &e)| if e <= sigma { l } else { VOID })
            .collect(),
    }
}

/// Keeps labels whose maximum probability is at least `threshold`.
pub fn probability_filter(labels: &LabelMap, prob: &ProbMap, threshold: f64) -> LabelMap {
    assert_eq!(labels.labels.len(), prob.len());
    LabelMap {
        height: labels.height,
        width: labels.width,
        labels: labels
            .labels
            .iter()
            .zip(prob.pixels())
            .map(|(&l, px)| {
                let max = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max >= threshold {
                    l
                } else {
                    VOID
                }
            })
            .collect(),
    }
}

/// Argmax labels passed through the configured filter.
pub fn pseudo_labels(prob: &ProbMap, mode: FilterMode, sigma: f64, prob_threshold: f64) -> LabelMap {
    let labels = argmax_label(prob);
    match mode {
        FilterMode::Entropy => entropy_filter(&labels, &entropy_map(prob), sigma),
        FilterMode::Probability => probability_filter(&labels, prob, prob_threshold),
        FilterMode::None => labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, k: usize, rng: &mut impl Rng) -> ProbMap {
        let mut probs = Vec::with_capacity(h * w * k);
        for _ in 0..h * w {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(3)).collect();
            let z: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / z));
        }
        ProbMap::new(h, w, k, probs).unwrap()
    }

    fn one_hot(k: usize, c: usize) -> Vec<f64> {
        (0..k).map(|i| if i == c { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn argmax_examples() {
        let p = ProbMap::new(1, 2, 6, [one_hot(6, 3), vec![1.0 / 6.0; 6]].concat()).unwrap();
        assert_eq!(argmax_label(&p).labels, vec![3, 0]);
    }

    #[test]
    fn argmax_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_map(4, 5, 6, &mut rng);
        let l = argmax_label(&p);
        for i in 0..20 {
            let px = p.pixel(i);
            let max = px.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(l.labels[i] as usize, px.iter().position(|&v| v == max).unwrap());
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(normalized_entropy(&[1.0 / 6.0; 6]), 1.0);
        assert_eq!(normalized_entropy(&[0.25; 4]), 1.0);
        assert_eq!(normalized_entropy(&one_hot(6, 2)), 0.0);
        let e = normalized_entropy(&[0.9, 0.1]);
        let direct = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()) / 2f64.ln();
        assert_eq!(e, direct);
        assert!((e - 0.4690).abs() < 5e-5);
    }

    #[test]
    fn filter_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_map(3, 3, 4, &mut rng);
        p.probs[..4].copy_from_slice(&one_hot(4, 1));
        let labels = argmax_label(&p);
        let e = entropy_map(&p);
        assert_eq!(entropy_filter(&labels, &e, 1.0), labels);
        let strict = entropy_filter(&labels, &e, 0.0);
        assert_eq!(strict.labels[0], 1);
        assert!(strict.labels[1..].iter().all(|&l| l == VOID));
        assert_eq!(probability_filter(&labels, &p, 0.0), labels);
        assert_eq!(probability_filter(&labels, &p, 1.0), strict);
    }

    #[test]
    fn filters_match_direct_comparison() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_map(8, 8, 6, &mut rng);
        let labels = argmax_label(&p);
        let e = entropy_map(&p);
        let ef = entropy_filter(&labels, &e, 0.5);
        let pf = probability_filter(&labels, &p, 0.25);
        for i in 0..64 {
            let ent = normalized_entropy(p.pixel(i));
            assert_eq!(ef.labels[i] != VOID, ent <= 0.5);
            let max = p.pixel(i).iter().cloned().fold(0.0, f64::max);
            assert_eq!(pf.labels[i] != VOID, max >= 0.25);
        }
    }

    #[test]
    fn boundary_entropy_is_retained() {
        let p = ProbMap::new(1, 1, 2, vec![0.9, 0.1]).unwrap();
        let e = entropy_map(&p);
        let l = entropy_filter(&argmax_label(&p), &e, e.values[0]);
        assert_eq!(l.labels, vec![0]);
    }

    #[test]
    fn from_tensor_layout() {
        let t = Tensor::new(&[1, 2, 1, 2], vec![0.2, 0.6, 0.8, 0.4]).unwrap();
        let maps = ProbMap::from_tensor(&t).unwrap();
        assert_eq!(maps[0].pixel(0), &[0.2, 0.8]);
        assert_eq!(maps[0].pixel(1), &[0.6, 0.4]);
        assert!(ProbMap::new(1, 1, 2, vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn label_map_rejects_out_of_range() {
        assert!(LabelMap::new(1, 2, vec![7, 0], 6).is_err());
        assert!(LabelMap::new(1, 2, vec![VOID, 5], 6).is_ok());
    }

    #[test]
    fn gray_rendering() {
        let e = EntropyMap {
            height: 1,
            width: 3,
            values: vec![0.0, 0.5, 1.0],
        };
        assert_eq!(e.to_gray(), vec![0, 128, 255]);
    }

    proptest! {
        #[test]
        fn entropy_filter_monotone_in_sigma(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_map(6, 6, 6, &mut rng);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let labels = argmax_label(&p);
            let e = entropy_map(&p);
            let (fl, fh) = (entropy_filter(&labels, &e, lo), entropy_filter(&labels, &e, hi));
            for (x, y) in fl.labels.iter().zip(&fh.labels) {
                prop_assert!(*x == VOID || x == y);
            }
            let (pl, ph) = (probability_filter(&labels, &p, lo), probability_filter(&labels, &p, hi));
            for (x, y) in ph.labels.iter().zip(&pl.labels) {
                prop_assert!(*x == VOID || x == y);
            }
        }

        #[test]
        fn entropy_invariant_under_class_permutation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_map(3, 3, 5, &mut rng);
            let perm = [3, 0, 4, 1, 2];
            let permuted: Vec<f64> = p.pixels().flat_map(|px| perm.iter().map(|&j| px[j]).collect::<Vec<_>>()).collect();
            let q = ProbMap::new(3, 3, 5, permuted).unwrap();
            let (ea, eb) = (entropy_map(&p), entropy_map(&q));
            for (x, y) in ea.values.iter().zip(&eb.values) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(x));
            }
        }
    }
}

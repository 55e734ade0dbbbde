//! Confusion matrix and segmentation scores (precision, recall, F1, OA, MA, mIoU).

use crate::error::{Error, Result};
use crate::VOID;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// `counts[i * k + j]` = pixels of true class `i` predicted as `j`.
/// VOID predictions land in a separate `rejected` column per true class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    rejected: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub iou: Vec<f64>,
}

/// Metrics document. `None` marks an undefined value (no countable pixel).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: PerClass,
    #[serde(rename = "OA")]
    pub oa: Option<f64>,
    #[serde(rename = "MA")]
    pub ma: Option<f64>,
    #[serde(rename = "mIoU")]
    pub miou: Option<f64>,
    pub pixels: u64,
    pub excluded_classes: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            rejected: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rejected(&self, truth: usize) -> u64 {
        self.rejected[truth]
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape("confusion_matrix", format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(Self {
            classes,
            counts,
            rejected: vec![0; classes],
        })
    }

    /// Counts every pixel whose ground truth is not VOID.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "accumulate",
                format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
            ));
        }
        let k = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == VOID {
                continue;
            }
            if g as usize >= k || (p != VOID && p as usize >= k) {
                return Err(Error::Invalid(format!("label pair ({p}, {g}) outside {k} classes")));
            }
            if p == VOID {
                self.rejected[g as usize] += 1;
            } else {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merge", format!("{} vs {} classes", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.rejected.iter_mut().zip(&other.rejected).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.rejected.iter().sum::<u64>()
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum::<u64>() + self.rejected[i]
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// Per-class scores; 0/0 cases are reported as 0.
    pub fn per_class(&self) -> PerClass {
        let k = self.classes;
        let mut pc = PerClass {
            precision: Vec::with_capacity(k),
            recall: Vec::with_capacity(k),
            f1: Vec::with_capacity(k),
            iou: Vec::with_capacity(k),
        };
        for c in 0..k {
            let tp = self.get(c, c);
            let (row, col) = (self.row_sum(c), self.col_sum(c));
            let p = Self::ratio(tp, col);
            let r = Self::ratio(tp, row);
            pc.precision.push(p);
            pc.recall.push(r);
            pc.f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
            pc.iou.push(Self::ratio(tp, row + col - tp));
        }
        pc
    }

    /// Classes without ground-truth support; left out of the MA and mIoU means.
    pub fn excluded_classes(&self) -> Vec<usize> {
        (0..self.classes).filter(|&c| self.row_sum(c) == 0).collect()
    }

    pub fn summary(&self) -> Metrics {
        let per_class = self.per_class();
        let total = self.total();
        let excluded = self.excluded_classes();
        let support: Vec<usize> = (0..self.classes).filter(|c| !excluded.contains(c)).collect();
        let mean = |v: &[f64]| {
            (!support.is_empty()).then(|| support.iter().map(|&c| v[c]).sum::<f64>() / support.len() as f64)
        };
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Metrics {
            oa: (total > 0).then(|| trace as f64 / total as f64),
            ma: mean(&per_class.recall),
            miou: mean(&per_class.iou),
            pixels: total,
            excluded_classes: excluded,
            per_class,
        }
    }

    /// Rows are true classes, the last column holds VOID predictions.
    pub fn write_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
        let mut header = vec!["truth\\pred".to_string()];
        header.extend((0..self.classes).map(name));
        header.push("void".into());
        let mut out = header.join(",") + "\n";
        for i in 0..self.classes {
            let mut row = vec![name(i)];
            row.extend((0..self.classes).map(|j| self.get(i, j).to_string()));
            row.push(self.rejected[i].to_string());
            out += &(row.join(",") + "\n");
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

impl Metrics {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

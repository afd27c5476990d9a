//! Confusion-matrix segmentation metrics.
//!
//! Per-class scores are `NaN` when a class has an empty union (absent from
//! both prediction and ground truth); such classes are left out of the
//! means.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::IGNORE_INDEX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    /// Row-major `counts[g * k + p]`.
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
            ignored: 0,
        }
    }

    /// Builds a matrix from nested rows `counts[g][p]`.
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Metric("confusion rows must form a square matrix".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
            ignored: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image worth of pixels.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Metric(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == IGNORE_INDEX {
                self.ignored += 1;
                continue;
            }
            for v in [p, g] {
                if v as usize >= self.k {
                    return Err(Error::Label {
                        label: v as u32,
                        index: i,
                        num_classes: self.k,
                    });
                }
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    fn tp_fp_fn(&self, c: usize) -> (f64, f64, f64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.k).map(|g| self.get(g, c)).sum();
        (tp as f64, (col - tp) as f64, (row - tp) as f64)
    }

    /// Drops the last class from both axes.
    pub fn without_last_class(&self) -> Self {
        let k = self.k.saturating_sub(1);
        let mut out = Self::new(k);
        for g in 0..k {
            for p in 0..k {
                out.counts[g * k + p] = self.get(g, p);
            }
        }
        out.ignored = self.ignored;
        out
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.k, rhs.k, "confusion matrices over different class counts");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
        self.ignored += rhs.ignored;
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: ConfusionMatrix) -> ConfusionMatrix {
        self += &rhs;
        self
    }
}

pub fn confusion(pred: &[u8], gt: &[u8], k: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// Overall accuracy: trace over total.
pub fn oa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metric("overall accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.k).map(|c| cm.get(c, c)).sum();
    Ok(trace as f64 / total as f64)
}

fn nan_mean(v: &[f64]) -> f64 {
    let kept: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

fn per_class(cm: &ConfusionMatrix, f: impl Fn(f64, f64, f64) -> f64) -> (Vec<f64>, f64) {
    let v: Vec<f64> = (0..cm.k)
        .map(|c| {
            let (tp, fp, fnn) = cm.tp_fp_fn(c);
            if tp + fp + fnn == 0.0 {
                f64::NAN
            } else {
                f(tp, fp, fnn)
            }
        })
        .collect();
    let m = nan_mean(&v);
    (v, m)
}

/// `TP / (TP + FP + FN)` per class and the mean.
pub fn iou_per_class(cm: &ConfusionMatrix) -> (Vec<f64>, f64) {
    per_class(cm, |tp, fp, fnn| tp / (tp + fp + fnn))
}

/// `2TP / (2TP + FP + FN)` per class and the mean.
pub fn f1_per_class(cm: &ConfusionMatrix) -> (Vec<f64>, f64) {
    per_class(cm, |tp, fp, fnn| 2.0 * tp / (2.0 * tp + fp + fnn))
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub id: usize,
    pub name: String,
    /// `null` when the class has an empty union.
    pub iou: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub oa: Option<f64>,
    pub miou: Option<f64>,
    pub mean_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: Option<f64>,
    pub miou: Option<f64>,
    pub mean_f1: Option<f64>,
    pub per_class: Vec<ClassScore>,
    pub pixels: u64,
    pub ignored: u64,
    /// The same scores with the last class removed from both axes.
    pub excluding_last_class: Summary,
    pub conventions: String,
}

fn summary(cm: &ConfusionMatrix) -> Summary {
    Summary {
        oa: oa(cm).ok(),
        miou: finite(iou_per_class(cm).1),
        mean_f1: finite(f1_per_class(cm).1),
    }
}

impl MetricsReport {
    pub fn new(cm: &ConfusionMatrix, class_names: &[&str]) -> Self {
        let (iou, _) = iou_per_class(cm);
        let (f1, _) = f1_per_class(cm);
        let s = summary(cm);
        Self {
            oa: s.oa,
            miou: s.miou,
            mean_f1: s.mean_f1,
            per_class: (0..cm.k)
                .map(|c| ClassScore {
                    id: c,
                    name: class_names.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string()),
                    iou: finite(iou[c]),
                    f1: finite(f1[c]),
                })
                .collect(),
            pixels: cm.total() + cm.ignored(),
            ignored: cm.ignored(),
            excluding_last_class: summary(&cm.without_last_class()),
            conventions: format!(
                "label {IGNORE_INDEX} ignored; classes with an empty union report null and are left out of the means"
            ),
        }
    }
}

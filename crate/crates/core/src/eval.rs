//! Confusion-matrix metrics for generalized zero-shot segmentation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};

/// `K x K` pixel counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one prediction/ground-truth pair. Ignore pixels in `gt` are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::shape(
                "accumulate",
                format!("pred {}x{}, gt {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
            ));
        }
        for (&p, &t) in pred.data().iter().zip(gt.data()) {
            if t == IGNORE {
                continue;
            }
            for id in [p, t] {
                if id as usize >= self.k {
                    return Err(Error::ClassOutOfRange {
                        id: id as usize,
                        classes: self.k,
                    });
                }
            }
        }
        for (&p, &t) in pred.data().iter().zip(gt.data()) {
            if t != IGNORE {
                self.counts[t as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("merge", format!("{} vs {} classes", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class has no union.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let gt: u64 = (0..self.k).map(|j| self.get(class, j)).sum();
        let pred: u64 = (0..self.k).map(|i| self.get(i, class)).sum();
        let union = gt + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

/// Mean IoU over `classes`, with the classes excluded for having no union.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    pub miou: f64,
    pub excluded: Vec<u16>,
}

pub fn miou(cm: &ConfusionMatrix, classes: &BTreeSet<u16>) -> Result<MiouResult> {
    if classes.is_empty() {
        return Err(Error::UndefinedMetric("empty class set".into()));
    }
    let mut sum = 0.0;
    let mut n = 0;
    let mut excluded = Vec::new();
    for &c in classes {
        if c as usize >= cm.num_classes() {
            return Err(Error::ClassOutOfRange {
                id: c as usize,
                classes: cm.num_classes(),
            });
        }
        match cm.iou(c as usize) {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => excluded.push(c),
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(format!("no class in {classes:?} has any pixels")));
    }
    Ok(MiouResult {
        miou: sum / n as f64,
        excluded,
    })
}

/// `2su / (s + u)`, zero when either side is zero.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s <= 0.0 || u <= 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Seen, unseen and harmonic mIoU as fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslReport {
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
    /// Classes with no union, left out of the means.
    pub excluded: Vec<u16>,
}

impl GzslReport {
    /// `seen / unseen / harmonic` as percentages with two decimals.
    pub fn row(&self) -> String {
        format!(
            "{:.2} / {:.2} / {:.2}",
            100.0 * self.seen,
            100.0 * self.unseen,
            100.0 * self.harmonic
        )
    }
}

/// A side with no scored class counts as zero.
pub fn gzsl_report(cm: &ConfusionMatrix, seen: &BTreeSet<u16>, unseen: &BTreeSet<u16>) -> Result<GzslReport> {
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("no scored pixels".into()));
    }
    let side = |set: &BTreeSet<u16>| -> Result<(f64, Vec<u16>)> {
        match miou(cm, set) {
            Ok(r) => Ok((r.miou, r.excluded)),
            Err(Error::UndefinedMetric(_)) => Ok((0.0, set.iter().copied().collect())),
            Err(e) => Err(e),
        }
    };
    let (s, mut ex) = side(seen)?;
    let (u, ex_u) = side(unseen)?;
    ex.extend(ex_u);
    Ok(GzslReport {
        seen: s,
        unseen: u,
        harmonic: harmonic_mean(s, u),
        excluded: ex,
    })
}

/// IoU of every class with a nonzero union, keyed by class id.
pub fn per_class_iou(cm: &ConfusionMatrix) -> BTreeMap<u16, f64> {
    (0..cm.num_classes())
        .filter_map(|c| cm.iou(c).map(|v| (c as u16, v)))
        .collect()
}

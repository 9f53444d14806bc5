//! Confusion-matrix accumulation and intersection-over-union scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{LabelMap, IGNORE};
use crate::error::{Error, Result};

/// `classes x classes` pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// IoU of every evaluable class in a subset and their mean.
///
/// Classes that appear neither in the prediction nor the ground truth have
/// no defined IoU; they are listed in `excluded` and left out of the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: BTreeMap<usize, f64>,
    pub excluded: Vec<usize>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Pixels whose ground truth is [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        if let Some(index) = pred.data().iter().position(|&p| p as usize >= self.classes) {
            return Err(Error::InvalidLabel {
                label: pred.data()[index],
                index,
                classes: self.classes,
            });
        }
        gt.validate(self.classes)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU `tp / (row + col - tp)` and their mean over `subset`.
    pub fn miou(&self, subset: &[usize]) -> Result<IouReport> {
        if subset.is_empty() {
            return Err(Error::InvalidArgument("mIoU class subset is empty".into()));
        }
        let mut per_class = BTreeMap::new();
        let mut excluded = Vec::new();
        for &k in subset {
            if k >= self.classes {
                return Err(Error::InvalidArgument(format!(
                    "class {k} outside a {}-class matrix",
                    self.classes
                )));
            }
            let tp = self.get(k, k);
            let row: u64 = (0..self.classes).map(|p| self.get(k, p)).sum();
            let col: u64 = (0..self.classes).map(|g| self.get(g, k)).sum();
            let union = row + col - tp;
            if union == 0 {
                excluded.push(k);
            } else {
                per_class.insert(k, tp as f64 / union as f64);
            }
        }
        if per_class.is_empty() {
            return Err(Error::InvalidArgument(
                "no class in the subset occurs in prediction or ground truth".into(),
            ));
        }
        let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
        Ok(IouReport { per_class, excluded, mean })
    }

    /// [`ConfusionMatrix::miou`] over every class.
    pub fn miou_all(&self) -> Result<IouReport> {
        let all: Vec<usize> = (0..self.classes).collect();
        self.miou(&all)
    }
}

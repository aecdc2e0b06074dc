use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::IGNORE_ID;

/// Pixel confusion counts, `counts[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub samples: usize,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
            samples: 0,
        }
    }

    /// Adds one label map pair; ignored truth pixels are skipped.
    pub fn add(&mut self, prediction: &[u8], truth: &[u8]) -> Result<()> {
        if prediction.len() != truth.len() {
            return Err(Error::shape("prediction map", truth.len(), prediction.len()));
        }
        let k = self.num_classes;
        for (i, (&p, &t)) in prediction.iter().zip(truth).enumerate() {
            if t == IGNORE_ID {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i}: truth {t} / prediction {p} outside [0, {k})"
                )));
            }
            self.counts[t as usize][p as usize] += 1;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion classes", self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.samples += other.samples;
        Ok(())
    }

    pub fn truth_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn report(&self) -> Result<EvalReport> {
        let k = self.num_classes;
        let truth = self.truth_totals();
        let predicted: Vec<u64> = (0..k).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect();
        let total: u64 = truth.iter().sum();
        let mut per_class_iou = Vec::with_capacity(k);
        let mut correct = 0;
        for c in 0..k {
            let tp = self.counts[c][c];
            correct += tp;
            let union = truth[c] + predicted[c] - tp;
            per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let valid: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        if valid.is_empty() {
            return Err(Error::InvalidArgument("no class has a nonzero union".into()));
        }
        Ok(EvalReport {
            miou: valid.iter().sum::<f64>() / valid.len() as f64,
            pixel_accuracy: correct as f64 / total as f64,
            chance_miou: chance_miou(&truth).expect("nonzero total"),
            per_class_iou,
            confusion: self.counts.clone(),
            samples: self.samples,
        })
    }
}

/// mIoU of the best predictor that outputs one class everywhere.
///
/// Predicting class `c` gives `IoU_c = n_c / N`, zero for every other class
/// present in the truth, and excludes classes absent from both.
pub fn chance_miou(truth_totals: &[u64]) -> Option<f64> {
    let total: u64 = truth_totals.iter().sum();
    if total == 0 {
        return None;
    }
    let present = truth_totals.iter().filter(|&&n| n > 0).count();
    (0..truth_totals.len())
        .map(|c| {
            let classes = present + usize::from(truth_totals[c] == 0);
            truth_totals[c] as f64 / total as f64 / classes as f64
        })
        .max_by(f64::total_cmp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` marks a class with zero union, excluded from the mean.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub chance_miou: f64,
    pub confusion: Vec<Vec<u64>>,
    pub samples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per class plus summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,class,value\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let v = iou.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "iou,{c},{v}");
        }
        let _ = writeln!(s, "miou,,{:.6}", self.miou);
        let _ = writeln!(s, "pixel_accuracy,,{:.6}", self.pixel_accuracy);
        let _ = writeln!(s, "chance_miou,,{:.6}", self.chance_miou);
        let _ = writeln!(s, "samples,,{}", self.samples);
        s
    }
}

/// Accumulates every prediction/truth pair into one confusion matrix.
pub fn evaluate_miou<P, T>(predictions: &[P], truths: &[T], num_classes: usize) -> Result<EvalReport>
where
    P: AsRef<[u8]>,
    T: AsRef<[u8]>,
{
    if predictions.len() != truths.len() {
        return Err(Error::shape("prediction count", truths.len(), predictions.len()));
    }
    let mut conf = Confusion::new(num_classes);
    for (p, t) in predictions.iter().zip(truths) {
        conf.add(p.as_ref(), t.as_ref())?;
    }
    conf.report()
}

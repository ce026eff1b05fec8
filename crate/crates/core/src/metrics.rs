//! Classification metrics: top-k accuracy, cross-entropy, per-class
//! precision/recall/F1 and the confusion matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{BatchIter, LabeledImage};
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::Real;
use crate::models::Classifier;
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over rows of `−ln(max(p[label], 1e-12))` for softmax rows `[B, K]`.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (b, k) = probs.dims2()?;
    if labels.len() != b {
        return Err(shape_err(format!("{} labels for {b} probability rows", labels.len())));
    }
    let mut sum = KahanSum::default();
    for (row, &label) in probs.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(invalid(format!("label {label} out of range for {k} classes")));
        }
        sum.add(-row[label].to_f64_lossy().max(PROB_FLOOR).ln());
    }
    Ok(sum.value() / b as f64)
}

/// Position of `label` when classes are ranked by probability, ties going
/// to the lower class index. Rank 0 is the top-1 prediction.
pub fn rank_of<T: Real>(row: &[T], label: usize) -> usize {
    let p = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count()
}

/// Highest-probability class, the lowest index winning ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub(crate) fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances of the class.
    pub support: u64,
    /// Instances predicted as the class.
    pub predicted: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: u64,
    pub top1: f64,
    pub top3: f64,
    pub loss: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    /// Per-class table as CSV with a header row.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,name,precision,recall,f1,support,predicted\n");
        for c in &self.per_class {
            let name = if c.name.contains([',', '"', '\n']) {
                format!("\"{}\"", c.name.replace('"', "\"\""))
            } else {
                c.name.clone()
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.class, name, c.precision, c.recall, c.f1, c.support, c.predicted
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Accumulates predictions batch by batch with integer counters and a
/// compensated loss sum.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    classes: usize,
    confusion: Vec<Vec<u64>>,
    top1: u64,
    top3: u64,
    samples: u64,
    loss: KahanSum,
}

impl MetricsAccumulator {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Self {
            classes,
            confusion: vec![vec![0; classes]; classes],
            top1: 0,
            top3: 0,
            samples: 0,
            loss: KahanSum::default(),
        })
    }

    pub fn add<T: Real>(&mut self, probs: &Tensor<T>, labels: &[usize]) -> Result<()> {
        let (b, k) = probs.dims2()?;
        if k != self.classes {
            return Err(shape_err(format!(
                "{k} probability columns for {} classes",
                self.classes
            )));
        }
        if labels.len() != b {
            return Err(shape_err(format!("{} labels for {b} probability rows", labels.len())));
        }
        for (row, &label) in probs.data().chunks_exact(k).zip(labels) {
            if label >= k {
                return Err(invalid(format!("label {label} out of range for {k} classes")));
            }
            let rank = rank_of(row, label);
            self.top1 += (rank < 1) as u64;
            self.top3 += (rank < 3) as u64;
            self.confusion[label][argmax(row)] += 1;
            self.loss.add(-row[label].to_f64_lossy().max(PROB_FLOOR).ln());
            self.samples += 1;
        }
        Ok(())
    }

    pub fn finish(&self, class_names: &[String]) -> Result<Evaluation> {
        if self.samples == 0 {
            return Err(Error::Data("cannot evaluate an empty sample set".into()));
        }
        let k = self.classes;
        let n = self.samples as f64;
        let mut per_class = Vec::with_capacity(k);
        let (mut sp, mut sr, mut sf, mut counted) = (0.0, 0.0, 0.0, 0usize);
        for c in 0..k {
            let tp = self.confusion[c][c];
            let support: u64 = self.confusion[c].iter().sum();
            let predicted: u64 = self.confusion.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            // classes absent from both truth and predictions carry no information
            if support > 0 || predicted > 0 {
                sp += precision;
                sr += recall;
                sf += f1;
                counted += 1;
            }
            per_class.push(ClassMetrics {
                class: c,
                name: class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                precision,
                recall,
                f1,
                support,
                predicted,
            });
        }
        let m = counted.max(1) as f64;
        Ok(Evaluation {
            samples: self.samples,
            top1: self.top1 as f64 / n,
            top3: self.top3 as f64 / n,
            loss: self.loss.value() / n,
            macro_precision: sp / m,
            macro_recall: sr / m,
            macro_f1: sf / m,
            per_class,
            confusion: self.confusion.clone(),
        })
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Inference-mode evaluation of a model or ensemble over `samples`.
pub fn evaluate<T: Real, C: Classifier<T> + ?Sized>(
    model: &C,
    samples: &[LabeledImage],
    class_names: &[String],
    batch_size: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty sample set".into()));
    }
    let mut acc = MetricsAccumulator::new(model.classes())?;
    for batch in BatchIter::sequential(samples, batch_size)? {
        let probs = model.predict_proba(&batch.images.cast::<T>())?;
        acc.add(&probs, &batch.labels)?;
    }
    acc.finish(class_names)
}

//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `confusion[gold][pred]` counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_pairs(num_classes: usize, gold: &[usize], pred: &[usize]) -> Self {
        let mut c = Confusion::new(num_classes);
        for (&g, &p) in gold.iter().zip(pred) {
            c.add(g, p);
        }
        c
    }

    pub fn add(&mut self, gold: usize, pred: usize) {
        let need = gold.max(pred) + 1;
        if need > self.counts.len() {
            for row in &mut self.counts {
                row.resize(need, 0);
            }
            self.counts.resize(need, vec![0; need]);
        }
        self.counts[gold][pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// Matthews correlation in its multiclass form; equals the usual
    /// `(TP·TN − FP·FN) / √(…)` for two classes. Defined as 0 when a
    /// marginal is constant.
    pub fn mcc(&self) -> f64 {
        let k = self.counts.len();
        let s = self.total() as f64;
        let c: f64 = (0..k).map(|i| self.counts[i][i] as f64).sum();
        let t: Vec<f64> = (0..k).map(|i| self.counts[i].iter().sum::<u64>() as f64).collect();
        let p: Vec<f64> = (0..k).map(|j| self.counts.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
        let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
        let denom = ((s * s - p.iter().map(|x| x * x).sum::<f64>()) * (s * s - t.iter().map(|x| x * x).sum::<f64>())).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            (c * s - tp) / denom
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mcc: f64,
    /// Mean cross-entropy against the gold labels.
    pub loss: f64,
    pub examples: usize,
}

impl Metrics {
    pub fn from_predictions(num_classes: usize, gold: &[usize], pred: &[usize], loss: f64) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::Empty("no labeled examples to evaluate".into()));
        }
        let c = Confusion::from_pairs(num_classes, gold, pred);
        Ok(Metrics {
            accuracy: c.accuracy(),
            mcc: c.mcc(),
            loss,
            examples: gold.len(),
        })
    }
}

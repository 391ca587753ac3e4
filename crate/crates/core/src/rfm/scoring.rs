//! Validation metrics and data splits.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Ranks with ties averaged, 1-based.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney rank statistic. `None` when
/// one of the classes is absent.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC averaged over the classes that have both positives and
/// negatives.
pub fn macro_auc(outputs: &DMatrix<f64>, labels: &[usize]) -> Option<f64> {
    let per_class: Vec<f64> = (0..outputs.ncols())
        .filter_map(|c| {
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let col: Vec<f64> = outputs.column(c).iter().copied().collect();
            auc(&col, &pos)
        })
        .collect();
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len().max(1) as f64
}

/// Coefficient of determination.
pub fn r_squared(pred: &[f64], target: &[f64]) -> f64 {
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    1.0 - ss_res / ss_tot
}

pub fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

/// Disjoint train/validation/test index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

const TRAIN_FRACTION: f64 = 0.70;
const VAL_FRACTION: f64 = 0.15;

fn cut(indices: &[usize]) -> (usize, usize) {
    let n = indices.len() as f64;
    let train = (n * TRAIN_FRACTION).round() as usize;
    let val = ((n * VAL_FRACTION).round() as usize).min(indices.len() - train);
    (train, val)
}

impl Split {
    /// Seeded shuffle followed by a 70/15/15 cut.
    pub fn shuffled(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(seed, 0));
        let (tr, va) = cut(&idx);
        let mut split = Self {
            train: idx[..tr].to_vec(),
            val: idx[tr..tr + va].to_vec(),
            test: idx[tr + va..].to_vec(),
        };
        split.sort();
        split
    }

    /// 70/15/15 within every class, so each part sees every class.
    pub fn stratified(labels: &[usize], seed: u64) -> Self {
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut split = Self {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for c in 0..classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            idx.shuffle(&mut rng_for(seed, c as u64));
            let (tr, va) = cut(&idx);
            split.train.extend_from_slice(&idx[..tr]);
            split.val.extend_from_slice(&idx[tr..tr + va]);
            split.test.extend_from_slice(&idx[tr + va..]);
        }
        split.sort();
        split
    }

    fn sort(&mut self) {
        self.train.sort_unstable();
        self.val.sort_unstable();
        self.test.sort_unstable();
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::EmptyInput("training split"));
        }
        if self.val.is_empty() {
            return Err(Error::EmptyInput("validation split"));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::InvalidParameter(format!("split index {i} out of range {n}")));
            }
            if seen[i] {
                return Err(Error::InvalidParameter(format!(
                    "index {i} appears in more than one split part"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

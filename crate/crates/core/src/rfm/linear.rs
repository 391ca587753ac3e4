//! Ridge-regression linear probe, the baseline RFM probes are compared against.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::probe::{TaskKind, Targets};
use super::scoring::{argmax_rows, auc, macro_auc, mse, Split};
use crate::error::{ensure_dims, Error, Result};
use crate::kernel::check_finite;

/// Ridge values tried on the validation split.
pub const RIDGE_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub task: TaskKind,
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Per-feature standardization from the training split.
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
    pub ridge: f64,
    pub val_score: f64,
}

fn one_hot(targets: &Targets) -> DMatrix<f64> {
    match targets {
        Targets::Binary(v) => DMatrix::from_fn(v.len(), 1, |i, _| v[i] as u8 as f64),
        Targets::Multiclass { labels, classes } => {
            DMatrix::from_fn(labels.len(), *classes, |i, c| (labels[i] == c) as u8 as f64)
        }
        Targets::Regression(v) => DMatrix::from_fn(v.len(), 1, |i, _| v[i]),
    }
}

impl LinearProbe {
    pub fn fit(features: &DMatrix<f64>, targets: &Targets, split: &Split) -> Result<Self> {
        let (n, d) = features.shape();
        ensure_dims(n, targets.len())?;
        split.validate(n)?;
        check_finite(features, "probe features")?;
        let y = one_hot(targets);
        let xt = features.select_rows(&split.train);
        let m = xt.nrows() as f64;
        let mean = xt.row_mean().transpose();
        let scale = DVector::from_fn(d, |j, _| {
            let var = xt.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / m;
            if var > 0.0 { var.sqrt() } else { 1.0 }
        });
        let standardize = |x: &DMatrix<f64>| {
            DMatrix::from_fn(x.nrows(), d, |i, j| (x[(i, j)] - mean[j]) / scale[j])
        };
        let zt = standardize(&xt);
        let zv = standardize(&features.select_rows(&split.val));
        let yt = y.select_rows(&split.train);
        let y_mean = yt.row_mean();
        let mut yc = yt.clone();
        for mut row in yc.row_iter_mut() {
            row -= &y_mean;
        }
        let gram = zt.tr_mul(&zt);
        let rhs = zt.tr_mul(&yc);

        let mut best: Option<LinearProbe> = None;
        for &ridge in &RIDGE_GRID {
            let mut a = gram.clone();
            for i in 0..d {
                a[(i, i)] += ridge * m;
            }
            let Some(chol) = a.cholesky() else { continue };
            let weights = chol.solve(&rhs);
            let bias = y_mean.transpose();
            let mut pred = &zv * &weights;
            for mut row in pred.row_iter_mut() {
                row += bias.transpose();
            }
            let score = validation_score(targets, &pred, &split.val)?;
            if best.as_ref().is_none_or(|b| score > b.val_score) {
                best = Some(LinearProbe {
                    task: targets.task(),
                    weights,
                    bias,
                    mean: mean.clone(),
                    scale: scale.clone(),
                    ridge,
                    val_score: score,
                });
            }
        }
        best.ok_or(Error::Singular { jitter: 0.0 })
    }

    pub fn raw_outputs(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dims(self.mean.len(), features.ncols())?;
        let z = DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.mean[j]) / self.scale[j]
        });
        let mut out = z * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(out)
    }

    pub fn predict_classes(&self, features: &DMatrix<f64>) -> Result<Vec<usize>> {
        let raw = self.raw_outputs(features)?;
        match self.task {
            TaskKind::Binary => Ok(raw.column(0).iter().map(|&v| (v >= 0.5) as usize).collect()),
            TaskKind::Multiclass { .. } => Ok(argmax_rows(&raw)),
            TaskKind::Regression => Err(Error::WrongTask {
                expected: "classification",
                found: self.task.name(),
            }),
        }
    }
}

fn validation_score(targets: &Targets, pred: &DMatrix<f64>, val: &[usize]) -> Result<f64> {
    let degenerate = || Error::DegenerateLabels("validation split contains a single class".into());
    match targets {
        Targets::Binary(v) => {
            let pos: Vec<bool> = val.iter().map(|&i| v[i]).collect();
            auc(pred.column(0).as_slice(), &pos).ok_or_else(degenerate)
        }
        Targets::Multiclass { labels, .. } => {
            let l: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
            macro_auc(pred, &l).ok_or_else(degenerate)
        }
        Targets::Regression(v) => {
            let t: Vec<f64> = val.iter().map(|&i| v[i]).collect();
            Ok(-mse(pred.column(0).as_slice(), &t))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_linear_rule() {
        let n = 90;
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * 37 + j * 11) % 17) as f64 - 8.0);
        let labels: Vec<usize> = (0..n)
            .map(|i| if x[(i, 0)] + 0.5 * x[(i, 1)] > 0.0 { 1 } else { 0 })
            .collect();
        let t = Targets::Multiclass { labels: labels.clone(), classes: 2 };
        let split = Split::stratified(&labels, 0);
        let probe = LinearProbe::fit(&x, &t, &split).unwrap();
        let pred = probe.predict_classes(&x).unwrap();
        let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / n as f64;
        assert!(acc > 0.9, "accuracy {acc}");
    }
}

//! Recursive feature machine probes.
//!
//! Each iteration fits a kernel ridge predictor on the mapped features
//! `T x`, takes the AGOP of that predictor with respect to the *original*
//! features, and replaces the map with `T = Q Λ^α Qᵀ` of the new AGOP. Because
//! gradients are taken through the current map, every AGOP (and therefore every
//! steering direction) lives in the model's activation space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::agop::{compute_agop, eigendecompose_psd, feature_map, EigenBasis};
use super::scoring::{argmax_rows, auc, macro_auc, mse, softmax_rows, Split};
use crate::error::{ensure_dims, Error, Result};
use crate::kernel::{check_finite, ChannelMode, GradientBatch, KernelParams, KrrModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    Binary,
    Multiclass { classes: usize },
    Regression,
}

impl TaskKind {
    pub fn name(&self) -> String {
        match self {
            TaskKind::Binary => "binary".into(),
            TaskKind::Multiclass { classes } => format!("multiclass({classes})"),
            TaskKind::Regression => "regression".into(),
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskKind::Regression)
    }
}

/// How per-timestep activations are reduced to one vector per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    LastToken,
}

/// Supervision for a probe.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `{0, 1}` labels.
    Binary(Vec<bool>),
    Multiclass { labels: Vec<usize>, classes: usize },
    /// Raw regression targets; z-normalized with training statistics.
    Regression(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Binary(v) => v.len(),
            Targets::Multiclass { labels, .. } => labels.len(),
            Targets::Regression(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Targets::Binary(_) => TaskKind::Binary,
            Targets::Multiclass { classes, .. } => TaskKind::Multiclass { classes: *classes },
            Targets::Regression(_) => TaskKind::Regression,
        }
    }

    /// Class index per sample (binary as 0/1); `None` for regression.
    pub fn class_labels(&self) -> Option<Vec<usize>> {
        match self {
            Targets::Binary(v) => Some(v.iter().map(|&b| b as usize).collect()),
            Targets::Multiclass { labels, .. } => Some(labels.clone()),
            Targets::Regression(_) => None,
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Binary(v) => Targets::Binary(rows.iter().map(|&i| v[i]).collect()),
            Targets::Multiclass { labels, classes } => Targets::Multiclass {
                labels: rows.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Regression(v) => Targets::Regression(rows.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RfmConfig {
    /// Number of AGOP updates; the loop fits `iterations + 1` predictors.
    pub iterations: usize,
    /// Spectral exponent `α` of the feature map.
    pub exponent: f64,
    pub kernel: KernelParams,
    pub ridge: f64,
    pub centered: bool,
}

impl Default for RfmConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            exponent: 0.5,
            kernel: KernelParams::laplace(10.0),
            ridge: 1e-3,
            centered: false,
        }
    }
}

/// A trained probe: the best-iteration predictor plus its AGOP eigenbasis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptProbe {
    /// `None` for aggregation probes that read stacked per-layer outputs.
    pub layer: Option<usize>,
    pub task: TaskKind,
    pub pooling: Pooling,
    pub model: KrrModel,
    /// Symmetric PSD map applied to raw features before the predictor.
    pub feature_map: DMatrix<f64>,
    pub basis: EigenBasis,
    pub centered: bool,
    /// AUC for classification, negated MSE (z-units) for regression.
    pub val_score: f64,
    pub best_iteration: usize,
    pub iteration_scores: Vec<f64>,
    /// Mean input gradient over class-1 training samples (all samples for
    /// regression); fixes the polarity of the steering direction.
    pub polarity: DVector<f64>,
    /// `(mean, std)` used to z-normalize regression targets.
    pub target_scale: Option<(f64, f64)>,
}

/// Unit concept direction for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringDirection {
    pub layer: usize,
    pub vector: DVector<f64>,
    pub eigenvalue: f64,
    /// `+1` if the raw eigenvector already pointed toward the concept.
    pub sign: i8,
    pub label: String,
}

struct Prepared {
    y: DMatrix<f64>,
    target_scale: Option<(f64, f64)>,
}

fn prepare_targets(targets: &Targets, split: &Split) -> Result<Prepared> {
    let n = targets.len();
    match targets {
        Targets::Binary(labels) => {
            let positives = split.train.iter().filter(|&&i| labels[i]).count();
            if positives == 0 || positives == split.train.len() {
                return Err(Error::DegenerateLabels(
                    "binary training labels contain a single class".into(),
                ));
            }
            Ok(Prepared {
                y: DMatrix::from_fn(n, 1, |i, _| labels[i] as u8 as f64),
                target_scale: None,
            })
        }
        Targets::Multiclass { labels, classes } => {
            if *classes < 2 {
                return Err(Error::DegenerateLabels("multiclass task needs >= 2 classes".into()));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::InvalidParameter(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
            let first = labels[split.train[0]];
            if split.train.iter().all(|&i| labels[i] == first) {
                return Err(Error::DegenerateLabels(
                    "multiclass training labels contain a single class".into(),
                ));
            }
            Ok(Prepared {
                y: DMatrix::from_fn(n, *classes, |i, c| (labels[i] == c) as u8 as f64),
                target_scale: None,
            })
        }
        Targets::Regression(values) => {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("regression targets"));
            }
            let m = split.train.len() as f64;
            let mean = split.train.iter().map(|&i| values[i]).sum::<f64>() / m;
            let var = split
                .train
                .iter()
                .map(|&i| (values[i] - mean).powi(2))
                .sum::<f64>()
                / m;
            let std = var.sqrt();
            if std == 0.0 {
                return Err(Error::DegenerateLabels("regression targets are constant".into()));
            }
            Ok(Prepared {
                y: DMatrix::from_fn(n, 1, |i, _| (values[i] - mean) / std),
                target_scale: Some((mean, std)),
            })
        }
    }
}

fn score(task: TaskKind, pred: &DMatrix<f64>, targets: &Targets, y_val: &DMatrix<f64>, val: &[usize]) -> Result<f64> {
    let s = match (task, targets) {
        (TaskKind::Binary, Targets::Binary(labels)) => {
            let pos: Vec<bool> = val.iter().map(|&i| labels[i]).collect();
            auc(pred.column(0).as_slice(), &pos).ok_or_else(|| {
                Error::DegenerateLabels("validation split contains a single class".into())
            })?
        }
        (TaskKind::Multiclass { .. }, Targets::Multiclass { labels, .. }) => {
            let l: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
            macro_auc(pred, &l).ok_or_else(|| {
                Error::DegenerateLabels("validation split contains a single class".into())
            })?
        }
        _ => -mse(pred.column(0).as_slice(), y_val.column(0).as_slice()),
    };
    // keep scores finite so they survive serialization
    Ok(if s.is_finite() { s } else { f64::MIN })
}

/// Trace of the covariance of the rows of `x`, times `n - 1`.
fn centered_energy(x: &DMatrix<f64>) -> f64 {
    let mean = x.row_mean();
    x.row_iter().map(|r| (r - &mean).norm_squared()).sum()
}

/// Scales `t` so mapped training features keep the total variance of the
/// raw features; the kernel bandwidth stays meaningful across iterations.
fn variance_matched(t: DMatrix<f64>, x_train: &DMatrix<f64>) -> DMatrix<f64> {
    let before = centered_energy(x_train);
    let after = centered_energy(&(x_train * &t));
    if before > 0.0 && after > 0.0 {
        t * (before / after).sqrt()
    } else {
        t
    }
}

/// Trains an RFM probe, keeping the iteration with the best validation score.
pub fn rfm_train(
    features: &DMatrix<f64>,
    targets: &Targets,
    split: &Split,
    config: &RfmConfig,
) -> Result<ConceptProbe> {
    let n = features.nrows();
    let d = features.ncols();
    ensure_dims(n, targets.len())?;
    split.validate(n)?;
    config.kernel.validate()?;
    if !(config.exponent.is_finite() && config.exponent > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "feature-map exponent must be positive, got {}",
            config.exponent
        )));
    }
    check_finite(features, "probe features")?;
    let task = targets.task();
    let prepared = prepare_targets(targets, split)?;

    let x_train = features.select_rows(&split.train);
    let x_val = features.select_rows(&split.val);
    let y_train = prepared.y.select_rows(&split.train);
    let y_val = prepared.y.select_rows(&split.val);
    let positive_rows: Vec<usize> = match targets {
        Targets::Binary(labels) => (0..split.train.len())
            .filter(|&r| labels[split.train[r]])
            .collect(),
        Targets::Regression(_) => (0..split.train.len()).collect(),
        Targets::Multiclass { .. } => Vec::new(),
    };

    let mut map = DMatrix::<f64>::identity(d, d);
    let mut best: Option<ConceptProbe> = None;
    let mut scores = Vec::with_capacity(config.iterations + 1);

    for t in 0..=config.iterations {
        let mapped = &x_train * &map;
        let model = KrrModel::fit(&mapped, &y_train, config.kernel, config.ridge)?;
        let val_pred = model.predict(&(&x_val * &map))?;
        let s = score(task, &val_pred, targets, &y_val, &split.val)?;
        scores.push(s);

        // chain rule through the symmetric map: ∇_x f(Tx) = T ∇_z f(z)
        let grads_z = model.input_gradients(&mapped, ChannelMode::PerChannel)?;
        let grads = GradientBatch {
            channels: grads_z.channels.iter().map(|g| g * &map).collect(),
        };
        let agop = compute_agop(&grads, config.centered)?;
        let basis = eigendecompose_psd(&agop)?;

        let improved = best.as_ref().is_none_or(|b| s > b.val_score);
        if improved {
            let polarity = if positive_rows.is_empty() {
                DVector::zeros(d)
            } else {
                let g = &grads.channels[0];
                let mut acc = DVector::zeros(d);
                for &r in &positive_rows {
                    acc += g.row(r).transpose();
                }
                acc / positive_rows.len() as f64
            };
            best = Some(ConceptProbe {
                layer: None,
                task,
                pooling: Pooling::Mean,
                model,
                feature_map: map.clone(),
                basis: basis.clone(),
                centered: config.centered,
                val_score: s,
                best_iteration: t,
                iteration_scores: Vec::new(),
                polarity,
                target_scale: prepared.target_scale,
            });
        }

        if t < config.iterations {
            if basis.values[0] <= 0.0 {
                log::debug!("AGOP vanished at iteration {t}; stopping early");
                break;
            }
            map = variance_matched(feature_map(&basis, config.exponent)?, &x_train);
        }
    }

    let mut probe = best.expect("at least one iteration runs");
    probe.iteration_scores = scores;
    Ok(probe)
}

impl ConceptProbe {
    pub fn input_dim(&self) -> usize {
        self.feature_map.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.model.outputs()
    }

    /// Raw predictor outputs (z-units for regression).
    pub fn raw_outputs(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dims(self.input_dim(), features.ncols())?;
        self.model.predict(&(features * &self.feature_map))
    }

    /// Softmax over the one-hot output channels.
    pub fn multiclass_predict(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.task {
            TaskKind::Multiclass { classes } => {
                ensure_dims(classes, self.outputs())?;
                Ok(softmax_rows(&self.raw_outputs(features)?))
            }
            other => Err(Error::WrongTask {
                expected: "multiclass",
                found: other.name(),
            }),
        }
    }

    /// Predicted class per row: threshold 0.5 for binary, argmax for multiclass.
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

    /// Regression predictions in the original target units.
    pub fn predict_values(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (mean, std) = self.target_scale.ok_or_else(|| Error::WrongTask {
            expected: "regression",
            found: self.task.name(),
        })?;
        let raw = self.raw_outputs(features)?;
        Ok(raw.column(0).iter().map(|v| v * std + mean).collect())
    }

    /// Top AGOP eigenvector, oriented so the class-1 mean gradient (the mean
    /// gradient for regression) projects non-negatively.
    pub fn extract_direction(&self, label: &str) -> Result<SteeringDirection> {
        if let TaskKind::Multiclass { .. } = self.task {
            return Err(Error::WrongTask {
                expected: "binary or regression",
                found: self.task.name(),
            });
        }
        let layer = self.layer.ok_or_else(|| {
            Error::InvalidParameter("aggregation probes have no layer to steer".into())
        })?;
        let (eigenvalue, q) = self.basis.top();
        if !(eigenvalue > 0.0) {
            return Err(Error::NoSignal);
        }
        let sign: i8 = if q.dot(&self.polarity) < 0.0 { -1 } else { 1 };
        let vector = q * f64::from(sign);
        let vector = &vector / vector.norm();
        Ok(SteeringDirection {
            layer,
            vector,
            eigenvalue,
            sign,
            label: label.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfm::scoring::Split;

    fn toy_binary(n: usize) -> (DMatrix<f64>, Targets) {
        // class decided by the sign of the first coordinate
        let x = DMatrix::from_fn(n, 3, |i, j| {
            let s = ((i * 7919 + j * 104729) % 1000) as f64 / 1000.0 - 0.5;
            if j == 0 {
                if i % 2 == 0 { 1.0 + s } else { -1.0 + s }
            } else {
                s * 2.0
            }
        });
        let labels = (0..n).map(|i| i % 2 == 0).collect();
        (x, Targets::Binary(labels))
    }

    #[test]
    fn zero_iterations_is_plain_krr() {
        let (x, t) = toy_binary(40);
        let split = Split::stratified(&t.class_labels().unwrap(), 1);
        let config = RfmConfig {
            iterations: 0,
            kernel: KernelParams::laplace(2.0),
            ..Default::default()
        };
        let probe = rfm_train(&x, &t, &split, &config).unwrap();
        assert_eq!(probe.feature_map, DMatrix::identity(3, 3));
        assert_eq!(probe.best_iteration, 0);
        assert_eq!(probe.iteration_scores.len(), 1);
        let y = DMatrix::from_fn(split.train.len(), 1, |r, _| split.train[r].is_multiple_of(2) as u8 as f64);
        let plain = KrrModel::fit(&x.select_rows(&split.train), &y, config.kernel, config.ridge).unwrap();
        assert_eq!(plain.alpha, probe.model.alpha);
    }

    #[test]
    fn single_class_rejected() {
        let (x, _) = toy_binary(20);
        let t = Targets::Binary(vec![true; 20]);
        let split = Split::shuffled(20, 0);
        assert!(matches!(
            rfm_train(&x, &t, &split, &RfmConfig::default()),
            Err(Error::DegenerateLabels(_))
        ));
        let t = Targets::Regression(vec![1.0; 20]);
        assert!(matches!(
            rfm_train(&x, &t, &split, &RfmConfig::default()),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn learns_separating_axis() {
        let (x, t) = toy_binary(80);
        let split = Split::stratified(&t.class_labels().unwrap(), 2);
        let config = RfmConfig {
            iterations: 5,
            kernel: KernelParams::laplace(2.0),
            ..Default::default()
        };
        let mut probe = rfm_train(&x, &t, &split, &config).unwrap();
        assert_eq!(probe.iteration_scores.len(), 6);
        assert!(probe.val_score > 0.95);
        probe.layer = Some(3);
        let dir = probe.extract_direction("pos").unwrap();
        assert_eq!(dir.layer, 3);
        assert!((dir.vector.norm() - 1.0).abs() < 1e-12);
        // class 1 sits at x0 = +1, so the oriented direction points along +e0
        assert!(dir.vector[0] > 0.9);
        assert!(matches!(probe.multiclass_predict(&x), Err(Error::WrongTask { .. })));
    }
}

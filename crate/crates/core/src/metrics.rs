//! Steering outcome metrics: probe accuracy, Fréchet distance, MMD, temporal
//! probe traces and trend statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::kernel::{check_finite, kernel_matrix, pairwise_distances, KernelParams};
use crate::model::GenerationTrace;
use crate::rfm::agop::{eigendecompose_symmetric, symmetrize};
use crate::rfm::scoring::average_ranks;
use crate::rfm::{ConceptProbe, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Baseline,
    Steered,
    Reference,
}

/// `n × d` pooled features of one population.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub data: DMatrix<f64>,
    pub tag: Provenance,
}

impl FeatureSet {
    pub fn new(data: DMatrix<f64>, tag: Provenance) -> Result<Self> {
        check_finite(&data, "feature set")?;
        Ok(Self { data, tag })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Fraction of rows whose predicted class equals the label.
pub fn probe_accuracy(probe: &ConceptProbe, features: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let classes = match probe.task {
        TaskKind::Regression => {
            return Err(Error::WrongTask {
                expected: "classification",
                found: probe.task.name(),
            })
        }
        TaskKind::Binary => 2,
        TaskKind::Multiclass { classes } => classes,
    };
    ensure_dims(features.nrows(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidParameter(format!("label {l} out of range for {classes} classes")));
    }
    let pred = probe.predict_classes(features)?;
    Ok(crate::rfm::scoring::accuracy(&pred, labels))
}

fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    symmetrize(&mut cov);
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let basis = eigendecompose_symmetric(m)?;
    let mut scaled = basis.vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= basis.values[j].sqrt();
    }
    let mut s = scaled * basis.vectors.transpose();
    symmetrize(&mut s);
    Ok(s)
}

/// Ridge added to both covariances.
pub const FD_RIDGE: f64 = 1e-6;

/// `‖μ_A − μ_B‖² + tr(Σ_A + Σ_B − 2 (Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2})` of
/// Gaussian fits, clamped at zero.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    ensure_dims(a.dim(), b.dim())?;
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidParameter(
            "Fréchet distance needs at least 2 samples per set".into(),
        ));
    }
    let d = a.dim();
    let (mu_a, mut cov_a) = mean_and_covariance(&a.data);
    let (mu_b, mut cov_b) = mean_and_covariance(&b.data);
    for i in 0..d {
        cov_a[(i, i)] += FD_RIDGE;
        cov_b[(i, i)] += FD_RIDGE;
    }
    let root_a = psd_sqrt(&cov_a)?;
    let mut inner = &root_a * &cov_b * &root_a;
    symmetrize(&mut inner);
    let cross: f64 = eigendecompose_symmetric(&inner)?
        .values
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let fd = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Median of the pairwise distances among all rows of `a` and `b` together.
pub fn median_heuristic(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let pooled = DMatrix::from_fn(a.nrows() + b.nrows(), a.ncols(), |i, j| {
        if i < a.nrows() {
            a[(i, j)]
        } else {
            b[(i - a.nrows(), j)]
        }
    });
    let dist = pairwise_distances(&pooled, &pooled, 2.0);
    let n = pooled.nrows();
    let mut upper: Vec<f64> = (0..n)
        .flat_map(|j| (0..j).map(move |i| (i, j)))
        .map(|(i, j)| dist[(i, j)])
        .collect();
    upper.sort_by(f64::total_cmp);
    let m = upper.len();
    if m == 0 {
        return 0.0;
    }
    if m % 2 == 1 {
        upper[m / 2]
    } else {
        0.5 * (upper[m / 2 - 1] + upper[m / 2])
    }
}

/// Unbiased MMD² with the kernel `exp(−‖x − z‖² / L²)`. `bandwidth` defaults
/// to the median heuristic over the pooled sample.
///
/// With equal sizes this is the U-statistic over pairs `i ≠ j` of
/// `k(a_i, a_j) + k(b_i, b_j) − k(a_i, b_j) − k(a_j, b_i)`, which is exactly
/// zero for `A = B`; otherwise only the within-set diagonals are dropped.
pub fn mmd(a: &FeatureSet, b: &FeatureSet, bandwidth: Option<f64>) -> Result<f64> {
    ensure_dims(a.dim(), b.dim())?;
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::InvalidParameter("MMD needs at least 2 samples per set".into()));
    }
    let mut l = bandwidth.unwrap_or_else(|| median_heuristic(&a.data, &b.data));
    if l <= 0.0 {
        // every pooled point coincides
        l = 1.0;
    }
    let params = KernelParams::gaussian(l);
    let kaa = kernel_matrix(&a.data, &a.data, &params)?;
    let kbb = kernel_matrix(&b.data, &b.data, &params)?;
    let kab = kernel_matrix(&a.data, &b.data, &params)?;
    let off_diagonal = |k: &DMatrix<f64>| k.sum() - k.trace();
    let xx = off_diagonal(&kaa) / (m * (m - 1)) as f64;
    let yy = off_diagonal(&kbb) / (n * (n - 1)) as f64;
    let xy = if m == n {
        off_diagonal(&kab) / (m * (m - 1)) as f64
    } else {
        kab.sum() / (m * n) as f64
    };
    Ok(xx + yy - 2.0 * xy)
}

/// Row `t` averages rows `max(0, t + 1 − w) ..= t` of `states`; `None`
/// averages the whole prefix.
pub fn causal_pool(states: &DMatrix<f64>, window: Option<usize>) -> DMatrix<f64> {
    let (t_len, d) = states.shape();
    let mut out = DMatrix::zeros(t_len, d);
    let mut sum = DVector::<f64>::zeros(d);
    for t in 0..t_len {
        sum += states.row(t).transpose();
        let mut count = t + 1;
        if let Some(w) = window {
            if t >= w {
                sum -= states.row(t - w).transpose();
                count = w;
            }
        }
        out.set_row(t, &(&sum / count as f64).transpose());
    }
    out
}

/// Trailing moving average of width `w`; `w <= 1` returns the input.
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    if w <= 1 {
        return values.to_vec();
    }
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (t, v) in values.iter().enumerate() {
        sum += v;
        if t >= w {
            sum -= values[t - w];
        }
        out.push(sum / (t + 1).min(w) as f64);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceOptions {
    /// Trailing pooling window in steps; `None` pools the whole prefix.
    pub window: Option<usize>,
    /// Moving-average width applied to the softmax series.
    pub smoothing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalTrace {
    pub target: usize,
    pub values: Vec<f64>,
    pub smoothing: usize,
}

/// `T × C` per-step class probabilities of a multiclass probe over causally
/// pooled states of the probe's layer.
pub fn class_probabilities(
    probe: &ConceptProbe,
    trace: &GenerationTrace,
    window: Option<usize>,
) -> Result<DMatrix<f64>> {
    let layer = probe.layer.ok_or_else(|| {
        Error::InvalidParameter("temporal traces need a layer probe".into())
    })?;
    let states = trace.states.get(&layer).ok_or(Error::LayerNotRecorded(layer))?;
    probe.multiclass_predict(&causal_pool(states, window))
}

pub fn temporal_trace(
    probe: &ConceptProbe,
    trace: &GenerationTrace,
    target: usize,
    options: &TraceOptions,
) -> Result<TemporalTrace> {
    let probs = class_probabilities(probe, trace, options.window)?;
    if target >= probs.ncols() {
        return Err(Error::InvalidParameter(format!(
            "target class {target} out of range for {} classes",
            probs.ncols()
        )));
    }
    let raw: Vec<f64> = probs.column(target).iter().copied().collect();
    Ok(TemporalTrace {
        target,
        values: smooth(&raw, options.smoothing),
        smoothing: options.smoothing,
    })
}

/// Elementwise mean of equal-length series.
pub fn average_series(series: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = series.first().ok_or(Error::EmptyInput("series"))?;
    let mut out = vec![0.0; first.len()];
    for s in series {
        ensure_dims(first.len(), s.len())?;
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    let n = series.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// `None` when either input has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Tolerance {
    Absolute(f64),
    /// Fraction of the previous value.
    Relative(f64),
}

/// Adjacent steps where `ys` drops by more than the tolerance.
pub fn monotone_violations(ys: &[f64], tolerance: Tolerance) -> usize {
    ys.windows(2)
        .filter(|w| {
            let allowed = match tolerance {
                Tolerance::Absolute(a) => a,
                Tolerance::Relative(r) => r * w[0].abs(),
            };
            w[1] < w[0] - allowed
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendStats {
    /// `None` is undefined (zero variance).
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub monotone_violations: usize,
}

pub fn trend_stats(xs: &[f64], ys: &[f64], tolerance: Tolerance) -> Result<TrendStats> {
    ensure_dims(xs.len(), ys.len())?;
    if xs.len() < 3 {
        return Err(Error::InvalidParameter("trend statistics need at least 3 points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trend series"));
    }
    Ok(TrendStats {
        pearson: pearson(xs, ys),
        spearman: spearman(xs, ys),
        monotone_violations: monotone_violations(ys, tolerance),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> FeatureSet {
        FeatureSet::new(DMatrix::from_fn(rows, cols, f), Provenance::Reference).unwrap()
    }

    #[test]
    fn fd_identical_and_one_dimensional() {
        let a = set(30, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.3);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        let x = set(5, 1, |i, _| [0.0, 1.0, 3.0, -2.0, 0.5][i]);
        let y = set(5, 1, |i, _| [0.0, 1.0, 3.0, -2.0, 0.5][i] + 2.5);
        assert!((frechet_distance(&x, &y).unwrap() - 6.25).abs() < 1e-6);
    }

    #[test]
    fn mmd_identical_is_zero() {
        let a = set(20, 4, |i, j| ((i * 5 + j) % 7) as f64);
        assert!(mmd(&a, &a, None).unwrap().abs() < 1e-6);
        assert!(mmd(&set(1, 4, |_, _| 0.0), &a, None).is_err());
    }

    #[test]
    fn causal_pooling() {
        let s = DMatrix::from_fn(5, 1, |i, _| i as f64);
        let full = causal_pool(&s, None);
        assert_eq!(full.column(0).as_slice(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        let win = causal_pool(&s, Some(2));
        assert_eq!(win.column(0).as_slice(), &[0.0, 0.5, 1.5, 2.5, 3.5]);
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn trend_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let t = trend_stats(&xs, &[0.1, 0.2, 0.5, 0.9], Tolerance::Absolute(0.0)).unwrap();
        assert_eq!(t.spearman, Some(1.0));
        assert_eq!(t.monotone_violations, 0);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((trend_stats(&xs, &neg, Tolerance::Absolute(0.0)).unwrap().pearson.unwrap() + 1.0).abs() < 1e-15);
        let flat = trend_stats(&xs, &[2.0; 4], Tolerance::Absolute(0.0)).unwrap();
        assert_eq!(flat.pearson, None);
        assert!(trend_stats(&xs[..2], &xs[..2], Tolerance::Absolute(0.0)).is_err());
        assert_eq!(monotone_violations(&[1.0, 0.9, 0.95], Tolerance::Relative(0.05)), 1);
        assert_eq!(monotone_violations(&[1.0, 0.96, 0.95], Tolerance::Relative(0.05)), 0);
    }
}

mod common;

use std::collections::BTreeMap;

use common::*;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rfmsteer::metrics::{
    average_series, causal_pool, class_probabilities, frechet_distance, mmd, pearson,
    probe_accuracy, smooth, temporal_trace, trend_stats,
};
use rfmsteer::rfm::rfm_train;
use rfmsteer::{
    ConceptProbe, FeatureSet, GenerationTrace, KernelParams, Provenance, RfmConfig, Split, Targets,
    Tolerance, TraceOptions,
};

fn features(data: DMatrix<f64>) -> FeatureSet {
    FeatureSet::new(data, Provenance::Reference).unwrap()
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n);
    let cov = DMatrix::from_fn(x.ncols(), x.ncols(), |i, j| {
        (0..x.nrows()).map(|r| (x[(r, i)] - mu[i]) * (x[(r, j)] - mu[j])).sum::<f64>() / (n - 1.0)
    });
    (mu, cov)
}

/// tr((Σ_A Σ_B)^{1/2}) through the eigenvalues of `Lᵀ Σ_A L`, `Σ_B = L Lᵀ`.
fn oracle_fd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (mu_a, mut ca) = mean_cov(a);
    let (mu_b, mut cb) = mean_cov(b);
    for i in 0..ca.nrows() {
        ca[(i, i)] += 1e-6;
        cb[(i, i)] += 1e-6;
    }
    let l = Cholesky::new(cb.clone()).unwrap().l();
    let inner = l.transpose() * &ca * &l;
    let cross: f64 = inner.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).sum();
    ((mu_a - mu_b).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross).max(0.0)
}

fn shifted(r: &mut impl Rng, n: usize, d: usize, scale: f64, shift: f64) -> DMatrix<f64> {
    gaussian_matrix(r, n, d).map(|v| v * scale + shift)
}

#[test]
fn frechet_distance_matches_oracle() {
    let mut r = rng(50);
    for _ in 0..20 {
        let d = r.random_range(1..6);
        let (na, nb) = (r.random_range(d + 2..40), r.random_range(d + 2..40));
        let a = gaussian_matrix(&mut r, na, d);
        let b = shifted(&mut r, nb, d, 1.7, 0.4);
        let fd = frechet_distance(&features(a.clone()), &features(b.clone())).unwrap();
        let oracle = oracle_fd(&a, &b);
        assert!((fd - oracle).abs() < 1e-8 * oracle.max(1.0), "{fd} vs {oracle}");
    }
}

#[test]
fn frechet_distance_hand_cases() {
    let mut r = rng(51);
    let a = gaussian_matrix(&mut r, 30, 4);
    assert!(frechet_distance(&features(a.clone()), &features(a.clone())).unwrap() < 1e-6);

    // same spread, shifted mean: only the mean term survives
    let x = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]);
    let fd = frechet_distance(&features(x.clone()), &features(x.map(|v| v + 2.5))).unwrap();
    assert!((fd - 6.25).abs() < 1e-6);

    let b = shifted(&mut r, 25, 4, 0.5, 1.0);
    let base = frechet_distance(&features(a.clone()), &features(b.clone())).unwrap();
    let q = random_rotation(&mut r, 4);
    let rotated = frechet_distance(&features(&a * &q), &features(&b * &q)).unwrap();
    assert!((rotated - base).abs() < 1e-6);
    let moved = frechet_distance(&features(a.map(|v| v - 3.0)), &features(b.map(|v| v - 3.0))).unwrap();
    assert!((moved - base).abs() < 1e-6);
    let swapped = frechet_distance(&features(b.clone()), &features(a.clone())).unwrap();
    assert!((swapped - base).abs() < 1e-10);

    // rank-deficient covariance stays finite thanks to the ridge
    let flat = DMatrix::from_fn(3, 5, |i, _| i as f64);
    assert!(frechet_distance(&features(flat.clone()), &features(flat.map(|v| v * 2.0))).unwrap().is_finite());
}

fn gauss(x: &[f64], z: &[f64], l: f64) -> f64 {
    let s: f64 = x.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
    (-s / (l * l)).exp()
}

/// Direct double sums of the unbiased estimator.
fn oracle_mmd(a: &DMatrix<f64>, b: &DMatrix<f64>, l: f64) -> f64 {
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (xa, xb) = (rows(a), rows(b));
    let (m, n) = (xa.len(), xb.len());
    if m == n {
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    total += gauss(&xa[i], &xa[j], l) + gauss(&xb[i], &xb[j], l)
                        - gauss(&xa[i], &xb[j], l)
                        - gauss(&xa[j], &xb[i], l);
                }
            }
        }
        return total / (m * (m - 1)) as f64;
    }
    let mut xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += gauss(&xa[i], &xa[j], l);
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += gauss(&xb[i], &xb[j], l);
            }
        }
    }
    let mut xy = 0.0;
    for p in &xa {
        for q in &xb {
            xy += gauss(p, q, l);
        }
    }
    xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64
}

#[test]
fn mmd_matches_double_sum() {
    let mut r = rng(52);
    for (m, n) in [(10, 10), (12, 7), (3, 20)] {
        let a = gaussian_matrix(&mut r, m, 3);
        let b = shifted(&mut r, n, 3, 1.2, 0.3);
        let got = mmd(&features(a.clone()), &features(b.clone()), Some(1.5)).unwrap();
        assert!((got - oracle_mmd(&a, &b, 1.5)).abs() < 1e-12);
        let back = mmd(&features(b.clone()), &features(a.clone()), Some(1.5)).unwrap();
        assert!((got - back).abs() < 1e-10);
    }
    let a = gaussian_matrix(&mut r, 15, 3);
    assert!(mmd(&features(a.clone()), &features(a.clone()), None).unwrap().abs() < 1e-6);

    // clusters 100 bandwidths apart: cross terms vanish
    let l = 0.5;
    let near = gaussian_matrix(&mut r, 20, 2) * 0.1;
    let far = near.map(|v| v + 50.0);
    let got = mmd(&features(near.clone()), &features(far.clone()), Some(l)).unwrap();
    assert!((got - oracle_mmd(&near, &far, l)).abs() < 1e-3);
    assert!(got > 1.5);
    assert!(mmd(&features(a.rows(0, 1).into_owned()), &features(a.clone()), None).is_err());
}

#[test]
fn mmd_of_one_distribution_passes_a_permutation_test() {
    let mut r = rng(53);
    let pooled = gaussian_matrix(&mut r, 80, 3);
    let split = |order: &[usize]| {
        let a = pooled.select_rows(&order[..40]);
        let b = pooled.select_rows(&order[40..]);
        mmd(&features(a), &features(b), Some(1.7)).unwrap()
    };
    let mut order: Vec<usize> = (0..80).collect();
    order.shuffle(&mut r);
    let observed = split(&order).abs();
    let mut replicates: Vec<f64> = (0..200)
        .map(|_| {
            order.shuffle(&mut r);
            split(&order).abs()
        })
        .collect();
    replicates.sort_by(f64::total_cmp);
    assert!(observed < replicates[189], "{observed} vs {}", replicates[189]);
}

fn blob_probe(r: &mut impl Rng, classes: usize) -> (ConceptProbe, DMatrix<f64>, Vec<usize>, Split) {
    let n = 60 * classes;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = DMatrix::from_fn(n, classes, |i, j| 0.3 * normal(r) + if j == labels[i] { 3.0 } else { 0.0 });
    let split = Split::stratified(&labels, 1);
    let config = RfmConfig { iterations: 2, kernel: KernelParams::laplace(5.0), ..RfmConfig::default() };
    let targets = Targets::Multiclass { labels: labels.clone(), classes };
    let mut probe = rfm_train(&x, &targets, &split, &config).unwrap();
    probe.layer = Some(0);
    (probe, x, labels, split)
}

#[test]
fn probe_accuracy_cases() {
    let mut r = rng(54);
    let (probe, x, _, split) = blob_probe(&mut r, 2);
    let pred = probe.predict_classes(&x).unwrap();
    assert_eq!(probe_accuracy(&probe, &x, &pred).unwrap(), 1.0);
    let flipped: Vec<usize> = pred.iter().map(|p| 1 - p).collect();
    assert_eq!(probe_accuracy(&probe, &x, &flipped).unwrap(), 0.0);

    let train = x.select_rows(&split.train);
    let val = x.select_rows(&split.val);
    let truth = |rows: &[usize]| rows.iter().map(|i| i % 2).collect::<Vec<_>>();
    let train_acc = probe_accuracy(&probe, &train, &truth(&split.train)).unwrap();
    let val_acc = probe_accuracy(&probe, &val, &truth(&split.val)).unwrap();
    assert!(train_acc >= val_acc - 0.05);

    let (probe4, _, _, _) = blob_probe(&mut r, 4);
    let n = 4000;
    let query = gaussian_matrix(&mut r, n, 4) * 3.0;
    let mut random_labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    random_labels.shuffle(&mut r);
    let acc = probe_accuracy(&probe4, &query, &random_labels).unwrap();
    let sigma = (0.25 * 0.75 / n as f64).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sigma, "{acc}");
    assert!(probe_accuracy(&probe4, &query, &vec![4; n]).is_err());
}

fn trace_with_states(states: DMatrix<f64>) -> GenerationTrace {
    let steps = states.nrows();
    GenerationTrace {
        tokens: vec![0; steps],
        coefficients: vec![],
        gates: vec![false; steps],
        states: BTreeMap::from([(0, states)]),
    }
}

#[test]
fn temporal_traces() {
    let mut r = rng(55);
    let (probe, _, _, _) = blob_probe(&mut r, 3);
    let constant = trace_with_states(DMatrix::from_fn(40, 3, |_, j| [2.0, 0.5, -1.0][j]));
    let opts = TraceOptions { window: Some(8), smoothing: 5 };
    let t = temporal_trace(&probe, &constant, 0, &opts).unwrap();
    assert_eq!(t.values.len(), 40);
    assert!(t.values.iter().all(|v| (v - t.values[0]).abs() < 1e-12));

    let varying = trace_with_states(gaussian_matrix(&mut r, 60, 3) * 2.0);
    let probs = class_probabilities(&probe, &varying, None).unwrap();
    for row in probs.row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
    for c in 0..3 {
        let t = temporal_trace(&probe, &varying, c, &opts).unwrap();
        assert!(t.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let mut missing = varying.clone();
    missing.states.clear();
    assert!(temporal_trace(&probe, &missing, 0, &opts).is_err());
}

#[test]
fn causal_pooling_and_smoothing_by_brute_force() {
    let mut r = rng(56);
    let states = gaussian_matrix(&mut r, 30, 4);
    for window in [None, Some(1), Some(5), Some(64)] {
        let pooled = causal_pool(&states, window);
        for t in 0..30usize {
            let start = window.map_or(0, |w| (t + 1).saturating_sub(w));
            let rows: Vec<usize> = (start..=t).collect();
            let oracle = states.select_rows(&rows).row_mean();
            assert!((pooled.row(t) - oracle).amax() < 1e-12);
        }
    }
    let values: Vec<f64> = (0..20).map(|_| r.random::<f64>()).collect();
    let s = smooth(&values, 4);
    for t in 0..20usize {
        let lo = (t + 1).saturating_sub(4);
        let oracle = values[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64;
        assert!((s[t] - oracle).abs() < 1e-12);
    }
    assert_eq!(smooth(&values, 1), values);
    assert_eq!(average_series(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap(), vec![2.0, 4.0]);
    assert!(average_series(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn trend_statistics() {
    let xs = [0.15, 0.3, 0.45, 0.6, 0.75, 0.9, 1.05];
    let up = [0.1, 0.2, 0.35, 0.4, 0.8, 0.81, 0.9];
    let s = trend_stats(&xs, &up, Tolerance::Absolute(0.02)).unwrap();
    assert_eq!(s.spearman, Some(1.0));
    assert_eq!(s.monotone_violations, 0);
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);

    // drops: 0.01 (tolerated), 0.05 and 0.03 (counted)
    let noisy = [0.1, 0.2, 0.19, 0.25, 0.2, 0.3, 0.27];
    assert_eq!(trend_stats(&xs, &noisy, Tolerance::Absolute(0.02)).unwrap().monotone_violations, 2);
    // relative 5%: 0.2 → 0.19 is exactly 5% and tolerated
    assert_eq!(trend_stats(&xs, &noisy, Tolerance::Relative(0.05)).unwrap().monotone_violations, 2);

    let flat = trend_stats(&xs, &[0.5; 7], Tolerance::Absolute(0.0)).unwrap();
    assert_eq!((flat.pearson, flat.spearman), (None, None));
    assert!(trend_stats(&xs[..2], &up[..2], Tolerance::Absolute(0.0)).is_err());
}

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rfmsteer::{kernel_eval, kernel_matrix, ChannelMode, KernelParams, KrrModel};

/// exp(−(Σ|x_i − z_i|^p)^{q/p} / L^q), written out directly.
fn oracle_kernel(x: &[f64], z: &[f64], p: f64, q: f64, l: f64) -> f64 {
    let s: f64 = x.iter().zip(z).map(|(a, b)| (a - b).abs().powf(p)).sum();
    (-(s.powf(q / p)) / l.powf(q)).exp()
}

#[test]
fn kernel_eval_matches_direct_formula() {
    let mut r = rng(1);
    for _ in 0..200 {
        let q = r.random_range(0.3..2.0);
        let p = r.random_range(q..=2.0);
        let l = r.random_range(0.5..5.0);
        let d = r.random_range(1..6);
        let x: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let z: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
        let params = KernelParams::new(p, q, l).unwrap();
        let v = kernel_eval(&x, &z, &params).unwrap();
        assert!(v > 0.0 && v <= 1.0);
        assert!(rel_err(v, oracle_kernel(&x, &z, p, q, l)) < 1e-12);
    }
    let params = KernelParams::new(2.0, 1.0, 2.0).unwrap();
    assert!((kernel_eval(&[0.0, 0.0], &[2.0, 0.0], &params).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
    let params = KernelParams::gaussian(1.0);
    assert!((kernel_eval(&[1.0, 1.0], &[0.0, 0.0], &params).unwrap() - 0.135335283236613).abs() < 1e-12);
}

#[test]
fn separated_points_give_identity_kernel() {
    let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 10.0, 0.0, 0.0, 10.0]);
    let k = kernel_matrix(&x, &x, &KernelParams::laplace(0.5)).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                assert_eq!(k[(i, j)], 1.0);
            } else {
                // exp(−10/0.5) or exp(−√200/0.5)
                assert!(k[(i, j)] < 1e-6);
                assert_eq!(k[(i, j)], k[(j, i)]);
            }
        }
    }
}

#[test]
fn two_point_system_by_hand() {
    // K = [[1, k], [k, 1]] + λI, α = K⁻¹ y.
    let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let y = DMatrix::from_row_slice(2, 1, &[2.0, -1.0]);
    let params = KernelParams::laplace(1.0);
    for ridge in [0.0, 0.3] {
        let m = KrrModel::fit(&x, &y, params, ridge).unwrap();
        let k = (-1.0f64).exp();
        let (a, b) = (1.0 + ridge, k);
        let det = a * a - b * b;
        let alpha = [(a * 2.0 - b * -1.0) / det, (a * -1.0 - b * 2.0) / det];
        assert!((m.alpha[(0, 0)] - alpha[0]).abs() < 1e-10);
        assert!((m.alpha[(1, 0)] - alpha[1]).abs() < 1e-10);
        if ridge == 0.0 {
            let pred = m.predict(&x).unwrap();
            assert!((pred[(0, 0)] - 2.0).abs() < 1e-8 && (pred[(1, 0)] + 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn interpolation_at_zero_ridge() {
    let mut r = rng(2);
    for trial in 0..20 {
        let n = 1 + trial;
        let d = 1 + trial % 5;
        let x = gaussian_matrix(&mut r, n, d);
        let y = gaussian_matrix(&mut r, n, 2);
        let m = KrrModel::fit(&x, &y, KernelParams::laplace(2.0), 0.0).unwrap();
        let pred = m.predict(&x).unwrap();
        for (p, t) in pred.iter().zip(y.iter()) {
            assert!((p - t).abs() <= 1e-6 * t.abs().max(1.0), "n={n}: {p} vs {t}");
        }
    }
}

#[test]
fn large_ridge_shrinks_predictions() {
    let mut r = rng(3);
    let x = gaussian_matrix(&mut r, 30, 3);
    let y = DMatrix::from_fn(30, 1, |_, _| r.random_range(-1.0..1.0));
    let m = KrrModel::fit(&x, &y, KernelParams::laplace(1.0), 1e6).unwrap();
    assert!(m.predict(&x).unwrap().amax() < 1e-3);
}

#[test]
fn labels_enter_linearly() {
    let mut r = rng(4);
    let x = gaussian_matrix(&mut r, 25, 4);
    let y1 = gaussian_matrix(&mut r, 25, 2);
    let y2 = gaussian_matrix(&mut r, 25, 2);
    let q = gaussian_matrix(&mut r, 10, 4);
    let params = KernelParams::new(1.7, 1.2, 3.0).unwrap();
    let f = |y: &DMatrix<f64>| KrrModel::fit(&x, y, params, 1e-2).unwrap().predict(&q).unwrap();
    let diff = f(&(&y1 + &y2)) - f(&y1) - f(&y2);
    assert!(diff.amax() < 1e-8);
}

/// Central differences of the fitted predictor, per channel.
fn finite_difference(m: &KrrModel, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = x.len();
    let c = m.outputs();
    let mut g = DMatrix::zeros(c, d);
    for j in 0..d {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[j] += h;
        minus[j] -= h;
        let fp = m.predict(&DMatrix::from_row_slice(1, d, plus.as_slice())).unwrap();
        let fm = m.predict(&DMatrix::from_row_slice(1, d, minus.as_slice())).unwrap();
        for ch in 0..c {
            g[(ch, j)] = (fp[(0, ch)] - fm[(0, ch)]) / (2.0 * h);
        }
    }
    g
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q = r.random_range(0.7..1.4);
        let p = if r.random_bool(0.5) { 2.0 } else { r.random_range(q..2.0) };
        let l = r.random_range(1.0..4.0);
        let (n, d, c) = (r.random_range(3..15), r.random_range(1..6), r.random_range(1..4));
        let x = gaussian_matrix(&mut r, n, d);
        let y = gaussian_matrix(&mut r, n, c);
        let m = KrrModel::fit(&x, &y, KernelParams::new(p, q, l).unwrap(), 1e-2).unwrap();
        let xq = gaussian_matrix(&mut r, 3, d);
        let grads = m.input_gradients(&xq, ChannelMode::PerChannel).unwrap();
        // |t|^p has unbounded curvature near t = 0 when p < 2
        let h = if p == 2.0 { 1e-5 } else { 1e-7 };
        for i in 0..3 {
            let fd = finite_difference(&m, &xq.row(i).transpose(), h);
            for ch in 0..c {
                let analytic = grads.channels[ch].row(i);
                let err = (analytic - fd.row(ch)).norm() / fd.row(ch).norm().max(1e-6);
                worst = worst.max(err);
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn smooth_configuration_gradient() {
    let mut r = rng(6);
    let x = gaussian_matrix(&mut r, 12, 4);
    let y = gaussian_matrix(&mut r, 12, 1);
    let m = KrrModel::fit(&x, &y, KernelParams::new(2.0, 1.2, 2.0).unwrap(), 1e-3).unwrap();
    let xq = gaussian_matrix(&mut r, 5, 4);
    let grads = m.input_gradients(&xq, ChannelMode::Summed).unwrap();
    for i in 0..5 {
        let fd = finite_difference(&m, &xq.row(i).transpose(), 1e-5);
        let err = (grads.channels[0].row(i) - fd.row(0)).norm() / fd.row(0).norm();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn gaussian_single_sample_gradient_by_hand() {
    // f(x) = α exp(−‖x − x₁‖²/L²) ⇒ ∇f = −2α/L² · f/α · (x − x₁).
    let x1 = DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 2.0]);
    let y = DMatrix::from_row_slice(1, 1, &[1.5]);
    let m = KrrModel::fit(&x1, &y, KernelParams::gaussian(2.0), 0.0).unwrap();
    let xq = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 1.0]);
    let g = m.input_gradients(&xq, ChannelMode::PerChannel).unwrap().channels[0].row(0).transpose();
    let delta = (xq.row(0) - x1.row(0)).transpose();
    let k = (-delta.norm_squared() / 4.0).exp();
    let expected = &delta * (-2.0 * m.alpha[(0, 0)] * k / 4.0);
    assert!((&g - &expected).amax() < 1e-12);
    let toward = -delta;
    let cos = g.dot(&toward) / (g.norm() * toward.norm());
    assert!((cos.abs() - 1.0).abs() < 1e-12);
}

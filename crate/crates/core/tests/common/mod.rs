#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rfmsteer::rng::rng_for;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng_for(seed, 0)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_matrix(rng: &mut impl Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| normal(rng))
}

pub fn unit_vector(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    let v = DVector::from_fn(d, |_, _| normal(rng));
    &v / v.norm()
}

/// Two Gaussian blobs in `d` dimensions, means `±sep/2 · e₁`, class-major.
pub fn blobs(rng: &mut impl Rng, n_per_class: usize, d: usize, sep: f64) -> (DMatrix<f64>, Vec<bool>) {
    let n = 2 * n_per_class;
    let mut x = gaussian_matrix(rng, n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i >= n_per_class;
        x[(i, 0)] += if positive { sep / 2.0 } else { -sep / 2.0 };
        labels.push(positive);
    }
    (x, labels)
}

/// Orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_rotation(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, d, d).qr().q()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

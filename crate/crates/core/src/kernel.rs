//! The `K_{p,q}` kernel family, kernel ridge regression, and analytic input
//! gradients of a fitted kernel predictor.
//!
//! `K_{p,q}(x, z) = exp(-‖x - z‖_p^q / L^q)`. The Laplace kernel is `p = 2,
//! q = 1` and the Gaussian kernel is `p = q = 2`.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

/// Parameters of a `K_{p,q}` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Norm exponent, `q <= p <= 2`.
    pub p: f64,
    /// Outer exponent, `0 < q <= p`.
    pub q: f64,
    /// Length scale `L > 0`.
    pub bandwidth: f64,
}

impl KernelParams {
    pub fn new(p: f64, q: f64, bandwidth: f64) -> Result<Self> {
        let params = Self { p, q, bandwidth };
        params.validate()?;
        Ok(params)
    }

    pub fn laplace(bandwidth: f64) -> Self {
        Self { p: 2.0, q: 1.0, bandwidth }
    }

    pub fn gaussian(bandwidth: f64) -> Self {
        Self { p: 2.0, q: 2.0, bandwidth }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(self.q > 0.0 && self.q <= self.p && self.p <= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel exponents must satisfy 0 < q <= p <= 2, got p={} q={}",
                self.p, self.q
            )));
        }
        Ok(())
    }

    fn is_euclidean(&self) -> bool {
        self.p == 2.0
    }

    #[inline]
    fn value_at(&self, distance: f64) -> f64 {
        (-(distance / self.bandwidth).powf(self.q)).exp()
    }
}

/// `‖x - z‖_p` for real `p > 0`.
pub fn p_distance(x: &[f64], z: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        x.iter()
            .zip(z)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    } else {
        x.iter()
            .zip(z)
            .map(|(a, b)| (a - b).abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}

pub fn kernel_eval(x: &[f64], z: &[f64], params: &KernelParams) -> Result<f64> {
    params.validate()?;
    ensure_dims(x.len(), z.len())?;
    if !x.iter().chain(z).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("kernel argument"));
    }
    Ok(params.value_at(p_distance(x, z, params.p)))
}

pub(crate) fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Row-wise `‖x_i - z_j‖_p`. When `x` and `z` are the same matrix only the
/// upper triangle is computed and mirrored, so the result is exactly symmetric.
pub(crate) fn pairwise_distances(x: &DMatrix<f64>, z: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let (n, m) = (x.nrows(), z.nrows());
    let same = std::ptr::eq(x, z);
    let mut out = DMatrix::zeros(n, m);

    if p == 2.0 {
        let nx: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();
        let nz: Vec<f64> = z.row_iter().map(|r| r.norm_squared()).collect();
        let gram = x * z.transpose();
        for j in 0..m {
            let i_end = if same { j + 1 } else { n };
            for i in 0..i_end {
                let scale = nx[i] + nz[j];
                let mut d2 = scale - 2.0 * gram[(i, j)];
                // cancellation: fall back to the direct sum for close pairs
                if d2 <= 1e-8 * scale {
                    d2 = (x.row(i) - z.row(j)).norm_squared();
                }
                out[(i, j)] = d2.max(0.0).sqrt();
            }
        }
    } else {
        // column-major copies make the rows contiguous
        let xt = x.transpose();
        let zt = z.transpose();
        for j in 0..m {
            let zj = zt.column(j);
            let i_end = if same { j + 1 } else { n };
            for i in 0..i_end {
                out[(i, j)] = p_distance(xt.column(i).as_slice(), zj.as_slice(), p);
            }
        }
    }

    if same {
        for j in 0..m {
            for i in (j + 1)..n {
                out[(i, j)] = out[(j, i)];
            }
        }
    }
    out
}

/// `K(X, Z)` with entry `(i, j) = k(x_i, z_j)`.
pub fn kernel_matrix(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    params: &KernelParams,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    ensure_dims(x.ncols(), z.ncols())?;
    check_finite(x, "kernel argument")?;
    if !std::ptr::eq(x, z) {
        check_finite(z, "kernel argument")?;
    }
    let mut k = pairwise_distances(x, z, params.p);
    k.apply(|v| *v = params.value_at(*v));
    Ok(k)
}

/// How multi-output gradients are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    /// One gradient matrix per output channel.
    #[default]
    PerChannel,
    /// Gradient of the sum of all output channels.
    Summed,
}

/// Per-sample input gradients, one `m x d` matrix per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub channels: Vec<DMatrix<f64>>,
}

impl GradientBatch {
    pub fn from_rows(grads: DMatrix<f64>) -> Self {
        Self {
            channels: vec![grads],
        }
    }

    pub fn rows(&self) -> usize {
        self.channels.first().map_or(0, |g| g.nrows())
    }

    pub fn dim(&self) -> usize {
        self.channels.first().map_or(0, |g| g.ncols())
    }

    /// All channels stacked vertically.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (m, d) = (self.rows(), self.dim());
        let mut out = DMatrix::zeros(m * self.channels.len(), d);
        for (c, g) in self.channels.iter().enumerate() {
            out.rows_mut(c * m, m).copy_from(g);
        }
        out
    }
}

/// A fitted kernel ridge regression predictor `f(x) = K(x, X) α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrrModel {
    pub params: KernelParams,
    pub train_inputs: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    pub ridge: f64,
    /// Extra diagonal jitter that was needed to factor the system.
    #[serde(default)]
    pub jitter: f64,
}

impl KrrModel {
    /// Solves `(K(X, X) + λI) α = Y`.
    pub fn fit(
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        params: KernelParams,
        ridge: f64,
    ) -> Result<Self> {
        params.validate()?;
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("training inputs"));
        }
        ensure_dims(x.nrows(), y.nrows())?;
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ridge must be non-negative, got {ridge}"
            )));
        }
        check_finite(y, "training labels")?;
        let k = kernel_matrix(x, x, &params)?;
        let (alpha, jitter) = solve_regularized(k, ridge, y)?;
        Ok(Self {
            params,
            train_inputs: x.clone(),
            alpha,
            ridge,
            jitter,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.train_inputs.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dims(self.input_dim(), xq.ncols())?;
        Ok(kernel_matrix(xq, &self.train_inputs, &self.params)? * &self.alpha)
    }

    /// Analytic `∇_x f(x)` at every row of `xq`.
    ///
    /// At a query that coincides with a training point the self-term's
    /// distance power `0^{q-p}` is clamped so that term contributes zero.
    pub fn input_gradients(&self, xq: &DMatrix<f64>, mode: ChannelMode) -> Result<GradientBatch> {
        ensure_dims(self.input_dim(), xq.ncols())?;
        check_finite(xq, "gradient query")?;
        let alpha = match mode {
            ChannelMode::PerChannel => self.alpha.clone(),
            ChannelMode::Summed => {
                DMatrix::from_fn(self.alpha.nrows(), 1, |i, _| self.alpha.row(i).sum())
            }
        };
        let grads = if self.params.is_euclidean() {
            euclidean_gradients(&self.params, &self.train_inputs, &alpha, xq)
        } else {
            general_gradients(&self.params, &self.train_inputs, &alpha, xq)
        };
        Ok(GradientBatch { channels: grads })
    }
}

fn solve_regularized(
    mut k: DMatrix<f64>,
    ridge: f64,
    y: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += ridge;
    }
    if let Some(chol) = Cholesky::new(k.clone()) {
        return Ok((chol.solve(y), 0.0));
    }
    let mut jitter = 1e-10 * k.trace() / n as f64;
    if jitter <= 0.0 {
        jitter = 1e-10;
    }
    for attempt in 0..=3 {
        log::debug!("kernel system not positive definite, retry {attempt} with jitter {jitter:e}");
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(kj) {
            return Ok((chol.solve(y), jitter));
        }
        if attempt < 3 {
            jitter *= 10.0;
        }
    }
    Err(Error::Singular { jitter })
}

/// `p = 2`: `∇_x k(x, z) = k · (-q / L^q) · r^{q-2} · (x - z)`, assembled
/// with matrix products: `G_c = diag(W α_c) Xq - W diag(α_c) X`.
fn euclidean_gradients(
    params: &KernelParams,
    x: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    xq: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let (n, d) = (x.nrows(), x.ncols());
    let channels = alpha.ncols();
    let scale = -params.q / params.bandwidth.powf(params.q);
    let mut w = pairwise_distances(xq, x, 2.0);
    w.apply(|r| {
        *r = if *r > 0.0 {
            params.value_at(*r) * scale * r.powf(params.q - 2.0)
        } else {
            0.0
        }
    });
    let row_weights = &w * alpha;
    let mut scaled = DMatrix::zeros(n, channels * d);
    for c in 0..channels {
        let mut block = scaled.columns_mut(c * d, d);
        block.copy_from(x);
        for i in 0..n {
            block.row_mut(i).scale_mut(alpha[(i, c)]);
        }
    }
    let mixed = &w * scaled;
    (0..channels)
        .map(|c| {
            let mut g = xq.clone();
            for i in 0..g.nrows() {
                g.row_mut(i).scale_mut(row_weights[(i, c)]);
            }
            g - mixed.columns(c * d, d)
        })
        .collect()
}

/// General `p`: `∂_j ‖x - z‖_p^q = q · r^{q-p} · |x_j - z_j|^{p-1} · sign(x_j - z_j)`.
fn general_gradients(
    params: &KernelParams,
    x: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    xq: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let (n, d) = (x.nrows(), x.ncols());
    let m = xq.nrows();
    let channels = alpha.ncols();
    let (p, q) = (params.p, params.q);
    let scale = -q / params.bandwidth.powf(q);
    let xt = x.transpose();
    let xqt = xq.transpose();
    let mut out = vec![DMatrix::zeros(m, d); channels];
    let mut partial = vec![0.0; d];
    for i in 0..m {
        let xi = xqt.column(i);
        for j in 0..n {
            let zj = xt.column(j);
            let r = p_distance(xi.as_slice(), zj.as_slice(), p);
            if r == 0.0 {
                continue;
            }
            let coef = params.value_at(r) * scale * r.powf(q - p);
            for k in 0..d {
                let diff = xi[k] - zj[k];
                partial[k] = if diff == 0.0 {
                    0.0
                } else {
                    coef * diff.abs().powf(p - 1.0) * diff.signum()
                };
            }
            for (c, g) in out.iter_mut().enumerate() {
                let a = alpha[(j, c)];
                if a == 0.0 {
                    continue;
                }
                for k in 0..d {
                    g[(i, k)] += a * partial[k];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn self_kernel_is_one() {
        let x = [0.3, -1.2, 4.0];
        for params in [KernelParams::laplace(0.5), KernelParams::new(1.3, 0.8, 7.0).unwrap()] {
            assert_eq!(kernel_eval(&x, &x, &params).unwrap(), 1.0);
        }
    }

    #[test]
    fn kernel_values_by_hand() {
        let v = kernel_eval(&[0.0, 0.0], &[2.0, 0.0], &KernelParams::new(2.0, 1.0, 2.0).unwrap())
            .unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        assert!((v - 0.367879).abs() < 1e-6);
        let v = kernel_eval(&[1.0, 1.0], &[0.0, 0.0], &KernelParams::gaussian(1.0)).unwrap();
        assert!((v - 0.135335).abs() < 1e-6);
    }

    #[test]
    fn kernel_eval_errors() {
        let params = KernelParams::laplace(1.0);
        assert!(matches!(
            kernel_eval(&[0.0], &[0.0, 1.0], &params),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            kernel_eval(&[f64::NAN], &[0.0], &params),
            Err(Error::NonFinite(_))
        ));
        assert!(KernelParams::new(1.0, 1.5, 1.0).is_err());
        assert!(KernelParams::new(2.0, 1.0, 0.0).is_err());
        assert!(KernelParams::new(2.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn kernel_matrix_single_point_and_symmetry() {
        let params = KernelParams::laplace(1.5);
        let one = mat(&[&[1.0, 2.0]]);
        assert_eq!(kernel_matrix(&one, &one, &params).unwrap(), DMatrix::from_element(1, 1, 1.0));

        let x = DMatrix::from_fn(9, 4, |i, j| ((i * 3 + j * 7) % 5) as f64 * 0.37 - 0.2 * i as f64);
        for params in [params, KernelParams::new(1.4, 0.9, 2.0).unwrap()] {
            let k = kernel_matrix(&x, &x, &params).unwrap();
            assert_eq!((&k - k.transpose()).norm(), 0.0);
            assert!(k.diagonal().iter().all(|&v| v == 1.0));
            assert!(k.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn well_separated_points_decouple() {
        let x = mat(&[&[0.0, 0.0], &[10.0, 0.0], &[0.0, 10.0]]);
        let params = KernelParams::laplace(0.5);
        let k = kernel_matrix(&x, &x, &params).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(k[(i, j)], 1.0);
                } else {
                    // hand oracle: exp(-10/0.5) or exp(-sqrt(200)/0.5)
                    assert!(k[(i, j)] < 1e-6);
                }
            }
        }
        assert!((k[(0, 1)] - (-20.0f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn single_point_interpolates() {
        let x = mat(&[&[0.5, -0.5]]);
        let y = mat(&[&[3.25]]);
        let model = KrrModel::fit(&x, &y, KernelParams::laplace(1.0), 0.0).unwrap();
        assert_eq!(model.predict(&x).unwrap()[(0, 0)], 3.25);
    }

    #[test]
    fn two_point_system_matches_hand_solution() {
        let x = mat(&[&[0.0], &[1.0]]);
        let y = mat(&[&[1.0], &[-2.0]]);
        let params = KernelParams::laplace(1.0);
        let model = KrrModel::fit(&x, &y, params, 0.0).unwrap();
        // [[1, e], [e, 1]] α = y with e = exp(-1)
        let e = (-1.0f64).exp();
        let det = 1.0 - e * e;
        let a0 = (1.0 - e * -2.0) / det;
        let a1 = (-2.0 - e * 1.0) / det;
        assert!((model.alpha[(0, 0)] - a0).abs() < 1e-12);
        assert!((model.alpha[(1, 0)] - a1).abs() < 1e-12);
        let pred = model.predict(&x).unwrap();
        assert!((pred[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((pred[(1, 0)] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn huge_ridge_shrinks_to_zero() {
        let x = DMatrix::from_fn(12, 3, |i, j| (i as f64 * 0.7 + j as f64).sin());
        let y = DMatrix::from_fn(12, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let model = KrrModel::fit(&x, &y, KernelParams::laplace(2.0), 1e6).unwrap();
        let pred = model.predict(&x).unwrap();
        assert!(pred.amax() < 1e-3);
    }

    #[test]
    fn duplicate_points_need_jitter() {
        let x = mat(&[&[1.0, 1.0], &[1.0, 1.0], &[0.0, 2.0]]);
        let y = mat(&[&[1.0], &[1.0], &[0.0]]);
        let model = KrrModel::fit(&x, &y, KernelParams::gaussian(1.0), 0.0).unwrap();
        assert!(model.jitter > 0.0);
        assert!(model.alpha.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn far_queries_and_zero_alpha_predict_zero() {
        let x = mat(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let y = mat(&[&[1.0], &[2.0]]);
        let mut model = KrrModel::fit(&x, &y, KernelParams::laplace(1.0), 1e-3).unwrap();
        let far = mat(&[&[1e4, 1e4]]);
        assert!(model.predict(&far).unwrap()[(0, 0)].abs() < 1e-300);
        model.alpha.fill(0.0);
        assert_eq!(model.predict(&x).unwrap().amax(), 0.0);
        let grads = model.input_gradients(&x, ChannelMode::PerChannel).unwrap();
        assert_eq!(grads.channels[0].amax(), 0.0);
        assert!(matches!(
            model.predict(&mat(&[&[1.0]])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gaussian_single_sample_gradient_points_at_sample() {
        let x1 = mat(&[&[1.0, -2.0, 0.5]]);
        let model = KrrModel::fit(&x1, &mat(&[&[1.0]]), KernelParams::gaussian(3.0), 0.0).unwrap();
        let xq = mat(&[&[0.2, 0.4, -1.0]]);
        let g = model.input_gradients(&xq, ChannelMode::PerChannel).unwrap();
        let g = g.channels[0].row(0).transpose();
        let toward = (x1.row(0) - xq.row(0)).transpose();
        let cos = g.dot(&toward) / (g.norm() * toward.norm());
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_query_gradient_is_finite() {
        let x = mat(&[&[0.0, 0.0], &[1.0, 0.5]]);
        let y = mat(&[&[1.0], &[0.0]]);
        for params in [KernelParams::laplace(1.0), KernelParams::new(1.5, 0.8, 1.0).unwrap()] {
            let model = KrrModel::fit(&x, &y, params, 1e-3).unwrap();
            let g = model.input_gradients(&x, ChannelMode::PerChannel).unwrap();
            assert!(g.channels[0].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn summed_mode_adds_channels() {
        let x = DMatrix::from_fn(6, 3, |i, j| ((i + 2 * j) as f64).cos());
        let y = DMatrix::from_fn(6, 2, |i, j| (i * (j + 1)) as f64 * 0.1);
        let model = KrrModel::fit(&x, &y, KernelParams::new(2.0, 1.2, 1.5).unwrap(), 1e-4).unwrap();
        let per = model.input_gradients(&x, ChannelMode::PerChannel).unwrap();
        let sum = model.input_gradients(&x, ChannelMode::Summed).unwrap();
        assert_eq!(per.channels.len(), 2);
        assert_eq!(sum.channels.len(), 1);
        let diff = &per.channels[0] + &per.channels[1] - &sum.channels[0];
        assert!(diff.amax() < 1e-12);
        assert_eq!(per.stacked().nrows(), 12);
    }
}

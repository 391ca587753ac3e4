//! Average gradient outer product and its spectral feature map.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GradientBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgopMatrix {
    pub matrix: DMatrix<f64>,
    pub centered: bool,
}

/// `M = (1/n) Σ g_i g_iᵀ` over every row of every channel, optionally after
/// subtracting the mean gradient.
pub fn compute_agop(grads: &GradientBatch, centered: bool) -> Result<AgopMatrix> {
    if grads.rows() == 0 || grads.channels.is_empty() {
        return Err(Error::EmptyInput("gradient batch"));
    }
    let mut g = grads.stacked();
    let n = g.nrows() as f64;
    if centered {
        let mean = g.row_mean();
        for mut row in g.row_iter_mut() {
            row -= &mean;
        }
    }
    let mut m = g.tr_mul(&g) / n;
    symmetrize(&mut m);
    Ok(AgopMatrix { matrix: m, centered })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for j in 0..d {
        for i in (j + 1)..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Orthonormal eigenvectors (columns) with non-negative, descending eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenBasis {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl EigenBasis {
    pub fn top(&self) -> (f64, DVector<f64>) {
        (self.values[0], self.vectors.column(0).into_owned())
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }
}

pub fn eigendecompose_psd(m: &AgopMatrix) -> Result<EigenBasis> {
    eigendecompose_symmetric(&m.matrix)
}

pub(crate) fn eigendecompose_symmetric(m: &DMatrix<f64>) -> Result<EigenBasis> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Err(Error::EmptyInput("matrix"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric matrix"));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-8 * scale {
        return Err(Error::InvalidParameter(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(
        order.len(),
        order.iter().map(|&i| eig.eigenvalues[i].max(0.0)),
    );
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(EigenBasis { vectors, values })
}

/// `T = Q Λ^α Qᵀ`.
pub fn feature_map(basis: &EigenBasis, exponent: f64) -> Result<DMatrix<f64>> {
    if !(exponent.is_finite() && exponent > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "feature-map exponent must be positive, got {exponent}"
        )));
    }
    let powered = basis.values.map(|v| v.powf(exponent));
    let mut scaled = basis.vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= powered[j];
    }
    let mut t = scaled * basis.vectors.transpose();
    symmetrize(&mut t);
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]]) -> GradientBatch {
        GradientBatch::from_rows(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]))
    }

    #[test]
    fn rank_one_agop() {
        let g = [3.0, -4.0, 0.0];
        let m = compute_agop(&batch(&[&g]), false).unwrap();
        let basis = eigendecompose_psd(&m).unwrap();
        assert!((basis.values[0] - 25.0).abs() < 1e-10);
        let (_, q) = basis.top();
        let expected = DVector::from_row_slice(&g) / 5.0;
        assert!((q.dot(&expected).abs() - 1.0).abs() < 1e-12);
        assert!(basis.values.iter().skip(1).all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn centered_identical_gradients_vanish() {
        let m = compute_agop(&batch(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]), true).unwrap();
        assert_eq!(m.matrix.amax(), 0.0);
        assert!(m.centered);
    }

    #[test]
    fn unit_axes_average() {
        let m = compute_agop(&batch(&[&[1.0, 0.0], &[0.0, 1.0]]), false).unwrap();
        assert_eq!(m.matrix, DMatrix::from_diagonal_element(2, 2, 0.5));
    }

    #[test]
    fn empty_batch_rejected() {
        let empty = GradientBatch::from_rows(DMatrix::zeros(0, 3));
        assert!(matches!(compute_agop(&empty, false), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn diagonal_eigendecomposition_sorted() {
        let m = AgopMatrix {
            matrix: DMatrix::from_diagonal(&DVector::from_row_slice(&[3.0, 1.0, 2.0])),
            centered: false,
        };
        let b = eigendecompose_psd(&m).unwrap();
        assert_eq!(b.values.as_slice(), &[3.0, 2.0, 1.0]);
        for (col, axis) in [0, 2, 1].into_iter().enumerate() {
            assert!((b.vectors[(axis, col)].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_input_rejected_and_negatives_clamped() {
        let asym = AgopMatrix {
            matrix: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            centered: false,
        };
        assert!(eigendecompose_psd(&asym).is_err());
        let indefinite = AgopMatrix {
            matrix: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]),
            centered: false,
        };
        let b = eigendecompose_psd(&indefinite).unwrap();
        assert_eq!(b.values[1], 0.0);
    }

    #[test]
    fn feature_map_cases() {
        let eye = EigenBasis {
            vectors: DMatrix::identity(3, 3),
            values: DVector::from_element(3, 1.0),
        };
        for a in [0.25, 0.5, 2.0] {
            assert!((feature_map(&eye, a).unwrap() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);
        }
        let basis = EigenBasis {
            vectors: DMatrix::identity(2, 2),
            values: DVector::from_row_slice(&[4.0, 1.0]),
        };
        let t = feature_map(&basis, 0.5).unwrap();
        assert_eq!(t.diagonal().as_slice(), &[2.0, 1.0]);
        assert!(feature_map(&basis, 0.0).is_err());
    }

    #[test]
    fn unit_exponent_reconstructs_matrix() {
        let g = DMatrix::from_fn(7, 4, |i, j| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let m = compute_agop(&GradientBatch::from_rows(g), false).unwrap();
        let t = feature_map(&eigendecompose_psd(&m).unwrap(), 1.0).unwrap();
        assert!((t - &m.matrix).amax() < 1e-8 * m.matrix.amax());
    }
}

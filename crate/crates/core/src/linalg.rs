//! Small dense symmetric linear algebra.
//!
//! Every matrix the protocol inverts is a symmetric positive semidefinite
//! Gram matrix of at most `d x d`, frequently rank deficient. All routines
//! here go through a symmetric eigendecomposition and share one relative
//! eigenvalue cutoff, so `pinv`, `rank` and `log_det_on_range` always agree
//! on which directions count as the range.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative factor in the eigenvalue cutoff `d * lambda_max * EIG_REL_CUTOFF`.
pub const EIG_REL_CUTOFF: f64 = 1e-12;

/// Largest negative quadratic form `weighted_norm` still treats as zero.
pub const PSD_SLACK: f64 = 1e-12;

fn check_square(m: &Matrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matrix has NaN or infinite entries".into()));
    }
    Ok(())
}

/// Eigendecomposition of the symmetric part of `m`, plus the cutoff below
/// which eigenvalues are treated as zero.
pub struct SymEigen {
    pub values: Vector,
    pub vectors: Matrix,
    pub cutoff: f64,
}

impl SymEigen {
    pub fn new(m: &Matrix) -> Result<Self> {
        check_square(m)?;
        let d = m.nrows();
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        let cutoff = d as f64 * lambda_max * EIG_REL_CUTOFF;
        Ok(SymEigen {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
            cutoff,
        })
    }

    fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.values.len()).filter(move |&j| self.values[j].abs() > self.cutoff)
    }

    pub fn rank(&self) -> usize {
        self.kept().count()
    }

    /// Orthonormal basis (as columns) of the eigenvectors above the cutoff.
    pub fn range_basis(&self) -> Matrix {
        let cols: Vec<Vector> = self
            .kept()
            .map(|j| self.vectors.column(j).into_owned())
            .collect();
        if cols.is_empty() {
            Matrix::zeros(self.values.len(), 0)
        } else {
            Matrix::from_columns(&cols)
        }
    }
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix.
///
/// Only the symmetric part of `m` is used.
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    let eig = SymEigen::new(m)?;
    let d = m.nrows();
    let mut out = Matrix::zeros(d, d);
    for j in eig.kept() {
        let v = eig.vectors.column(j);
        out += (v * v.transpose()) / eig.values[j];
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// Number of eigenvalues above the cutoff.
pub fn rank(m: &Matrix) -> Result<usize> {
    Ok(SymEigen::new(m)?.rank())
}

/// `sqrt(z^T v z)`.
pub fn weighted_norm(z: &Vector, v: &Matrix) -> Result<f64> {
    check_square(v)?;
    if z.len() != v.nrows() {
        return Err(Error::Dimension(format!(
            "vector of length {} against {}x{} weight",
            z.len(),
            v.nrows(),
            v.ncols()
        )));
    }
    let q = z.dot(&(v * z));
    if !q.is_finite() {
        return Err(Error::NonFinite("quadratic form".into()));
    }
    if q < -PSD_SLACK {
        return Err(Error::NotPsd(q));
    }
    Ok(q.max(0.0).sqrt())
}

/// Logarithm of the pseudo-determinant: sum of `ln(lambda)` over the
/// positive eigenvalues above the cutoff.
pub fn log_det_on_range(m: &Matrix) -> Result<f64> {
    let eig = SymEigen::new(m)?;
    Ok(eig
        .kept()
        .map(|j| eig.values[j])
        .filter(|&l| l > 0.0)
        .map(f64::ln)
        .sum())
}

/// Checks that `m` is symmetric and has no eigenvalue below `-tol` (both
/// scaled by the largest entry magnitude).
pub fn is_symmetric_psd(m: &Matrix, tol: f64) -> bool {
    if m.nrows() != m.ncols() || m.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > tol * scale {
        return false;
    }
    let eig = SymmetricEigen::new(m.clone());
    eig.eigenvalues.iter().all(|&l| l >= -tol * scale)
}

//! Small dense linear-algebra helpers.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance under which a negative eigenvalue is treated as rounding noise.
pub const PSD_EIGEN_TOL: f64 = 1e-10;

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Checks that `m` is square and symmetric to within `rel_tol` of its largest entry.
pub fn check_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = asymmetry(m);
    if asym > rel_tol * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

fn clamped_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_symmetric(m, PSD_EIGEN_TOL)?;
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let scale = max.abs().max(min.abs());
    if min < -PSD_EIGEN_TOL * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            max_eigenvalue: max,
        });
    }
    eig.eigenvalues.apply(|l| *l = l.max(0.0));
    Ok(eig)
}

/// Validates that `m` is symmetric positive semidefinite.
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    clamped_eigen(m).map(|_| ())
}

/// Symmetric PSD square root `S` with `S·S = m`.
///
/// Negative eigenvalues no smaller than `-1e-10·λ_max` are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    // Diagonal input: avoid the eigensolver so the result is exact.
    if m.iter().enumerate().all(|(idx, v)| idx % (n + 1) == 0 || *v == 0.0) {
        check_psd(m)?;
        return Ok(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                m[(i, i)].max(0.0).sqrt()
            } else {
                0.0
            }
        }));
    }
    let eig = clamped_eigen(m)?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

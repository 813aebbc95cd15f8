//! Analytically tractable losses with exact gradients and exact gradient-noise
//! covariance.
//!
//! Finite-sum problems use the per-datum loss `f_i(θ) = ½(x_iᵀθ − y_i)²` and
//! `f = (1/n) Σ f_i`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{self, PSD_EIGEN_TOL};

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemKind {
    /// `f(θ) = ⟨θ, ḡ⟩`.
    Linear { g_bar: DVector<f64> },
    /// `f(θ) = ½ θᵀAθ − bᵀθ`.
    Quadratic { a: DMatrix<f64>, b: DVector<f64> },
    /// `f(θ) = (1/2n) Σ (x_iᵀθ − y_i)²`, rows of `x` are the data points.
    FiniteSumLeastSquares { x: DMatrix<f64>, y: DVector<f64> },
}

/// A differentiable loss. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    kind: ProblemKind,
}

impl Problem {
    pub fn linear(g_bar: DVector<f64>) -> Result<Self> {
        if g_bar.is_empty() {
            return Err(invalid("g_bar", "dimension must be positive"));
        }
        Ok(Self {
            kind: ProblemKind::Linear { g_bar },
        })
    }

    pub fn quadratic(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() == 0 {
            return Err(invalid("a", "dimension must be positive"));
        }
        check_dim(a.nrows(), a.ncols())?;
        check_dim(a.nrows(), b.len())?;
        linalg::check_symmetric(&a, 1e-12)?;
        linalg::check_psd(&a)?;
        Ok(Self {
            kind: ProblemKind::Quadratic { a, b },
        })
    }

    pub fn least_squares(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(invalid("x", format!("need at least 2 data points, got {}", x.nrows())));
        }
        if x.ncols() == 0 {
            return Err(invalid("x", "dimension must be positive"));
        }
        check_dim(x.nrows(), y.len())?;
        Ok(Self {
            kind: ProblemKind::FiniteSumLeastSquares { x, y },
        })
    }

    pub fn kind(&self) -> &ProblemKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ProblemKind::Linear { g_bar } => g_bar.len(),
            ProblemKind::Quadratic { b, .. } => b.len(),
            ProblemKind::FiniteSumLeastSquares { x, .. } => x.ncols(),
        }
    }

    /// Number of data points for finite-sum problems.
    pub fn num_data(&self) -> Option<usize> {
        match &self.kind {
            ProblemKind::FiniteSumLeastSquares { x, .. } => Some(x.nrows()),
            _ => None,
        }
    }

    pub fn is_finite_sum(&self) -> bool {
        self.num_data().is_some()
    }

    /// Unique minimiser, when the Hessian is invertible (never for linear losses).
    pub fn minimizer(&self) -> Option<DVector<f64>> {
        match &self.kind {
            ProblemKind::Linear { .. } => None,
            ProblemKind::Quadratic { a, b } => a.clone().lu().solve(b),
            ProblemKind::FiniteSumLeastSquares { x, y } => {
                let xt = x.transpose();
                (&xt * x).lu().solve(&(&xt * y))
            }
        }
        .filter(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn loss(&self, theta: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        Ok(match &self.kind {
            ProblemKind::Linear { g_bar } => g_bar.dot(theta),
            ProblemKind::Quadratic { a, b } => 0.5 * theta.dot(&(a * theta)) - b.dot(theta),
            ProblemKind::FiniteSumLeastSquares { x, y } => {
                let r = x * theta - y;
                0.5 * r.norm_squared() / x.nrows() as f64
            }
        })
    }

    pub fn full_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), theta.len())?;
        Ok(self.gradient_unchecked(theta))
    }

    pub(crate) fn gradient_unchecked(&self, theta: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            ProblemKind::Linear { g_bar } => g_bar.clone(),
            ProblemKind::Quadratic { a, b } => a * theta - b,
            ProblemKind::FiniteSumLeastSquares { x, .. } => {
                let mut g = DVector::zeros(x.ncols());
                for i in 0..x.nrows() {
                    self.add_datum_gradient(i, theta, 1.0, &mut g);
                }
                g / x.nrows() as f64
            }
        }
    }

    /// `out += weight · ∇f_i(θ)`. Finite-sum problems only.
    pub(crate) fn add_datum_gradient(&self, i: usize, theta: &DVector<f64>, weight: f64, out: &mut DVector<f64>) {
        if let ProblemKind::FiniteSumLeastSquares { x, y } = &self.kind {
            let row = x.row(i);
            let r = row.dot(&theta.transpose()) - y[i];
            for j in 0..x.ncols() {
                out[j] += weight * row[j] * r;
            }
        }
    }

    /// `n × d` matrix whose row `i` is `∇f_i(θ) = x_i (x_iᵀθ − y_i)`.
    pub fn per_datum_gradients(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), theta.len())?;
        match &self.kind {
            ProblemKind::FiniteSumLeastSquares { x, y } => {
                let r = x * theta - y;
                Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * r[i]))
            }
            _ => Err(Error::Unsupported(
                "per-datum gradients require a finite-sum problem".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CovMode {
    Isotropic { c: f64 },
    Constant { matrix: DMatrix<f64>, sqrt: DMatrix<f64> },
    Empirical,
}

/// How the gradient-noise covariance `Σ(θ)` is obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    mode: CovMode,
}

impl CovarianceSpec {
    /// `Σ = c·I`.
    pub fn isotropic(c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(invalid("covariance", format!("isotropic scale must be >= 0, got {c}")));
        }
        Ok(Self {
            mode: CovMode::Isotropic { c },
        })
    }

    /// A fixed PSD matrix, independent of θ.
    pub fn constant(matrix: DMatrix<f64>) -> Result<Self> {
        let sqrt = linalg::psd_sqrt(&matrix)?;
        Ok(Self {
            mode: CovMode::Constant { matrix, sqrt },
        })
    }

    /// Derived from the per-datum gradients of a finite-sum problem.
    pub fn empirical() -> Self {
        Self {
            mode: CovMode::Empirical,
        }
    }

    /// True when `Σ` does not depend on θ.
    pub fn is_constant(&self) -> bool {
        !matches!(self.mode, CovMode::Empirical)
    }

    pub fn is_empirical(&self) -> bool {
        matches!(self.mode, CovMode::Empirical)
    }

    pub fn covariance(&self, problem: &Problem, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = problem.dim();
        check_dim(d, theta.len())?;
        match &self.mode {
            CovMode::Isotropic { c } => Ok(DMatrix::identity(d, d) * *c),
            CovMode::Constant { matrix, .. } => {
                check_dim(d, matrix.nrows())?;
                Ok(matrix.clone())
            }
            CovMode::Empirical => {
                let grads = problem.per_datum_gradients(theta)?;
                let n = grads.nrows() as f64;
                let mean = grads.row_mean();
                let mut centred = grads;
                for mut row in centred.row_iter_mut() {
                    row -= &mean;
                }
                let sigma = centred.transpose() * &centred / n;
                Ok((&sigma + sigma.transpose()) * 0.5)
            }
        }
    }

    /// `Σ^{1/2}(θ)`.
    pub fn sqrt(&self, problem: &Problem, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = problem.dim();
        match &self.mode {
            CovMode::Isotropic { c } => {
                check_dim(d, theta.len())?;
                Ok(DMatrix::identity(d, d) * c.sqrt())
            }
            CovMode::Constant { sqrt, .. } => {
                check_dim(d, theta.len())?;
                check_dim(d, sqrt.nrows())?;
                Ok(sqrt.clone())
            }
            CovMode::Empirical => linalg::psd_sqrt(&self.covariance(problem, theta)?),
        }
    }

    pub fn diagonal(&self, problem: &Problem, theta: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.mode {
            CovMode::Isotropic { c } => {
                check_dim(problem.dim(), theta.len())?;
                Ok(DVector::from_element(problem.dim(), *c))
            }
            _ => Ok(self.covariance(problem, theta)?.diagonal()),
        }
    }

    /// `(diag Σ(θ), Σ^{1/2}(θ))` without recomputing Σ twice.
    pub fn diag_and_sqrt(&self, problem: &Problem, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match &self.mode {
            CovMode::Empirical => {
                let sigma = self.covariance(problem, theta)?;
                let sqrt = linalg::psd_sqrt(&sigma)?;
                Ok((sigma.diagonal(), sqrt))
            }
            CovMode::Constant { matrix, sqrt } => {
                check_dim(problem.dim(), theta.len())?;
                check_dim(problem.dim(), matrix.nrows())?;
                Ok((matrix.diagonal(), sqrt.clone()))
            }
            CovMode::Isotropic { .. } => Ok((self.diagonal(problem, theta)?, self.sqrt(problem, theta)?)),
        }
    }

    pub fn trace(&self, problem: &Problem, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.diagonal(problem, theta)?.sum())
    }

    /// Checks that this covariance is usable with `problem`.
    pub fn validate_for(&self, problem: &Problem) -> Result<()> {
        match &self.mode {
            CovMode::Constant { matrix, .. } => check_dim(problem.dim(), matrix.nrows()),
            CovMode::Empirical if !problem.is_finite_sum() => Err(Error::Unsupported(
                "empirical covariance requires a finite-sum problem".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// `Σ(θ)` for the given problem and covariance spec.
pub fn exact_covariance(problem: &Problem, cov: &CovarianceSpec, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    cov.covariance(problem, theta)
}

/// Relative PSD tolerance used for covariance checks.
pub const COVARIANCE_PSD_TOL: f64 = PSD_EIGEN_TOL;

//! SDE counterparts of SGD, RMSprop and Adam, their clamped auxiliary
//! variants, and an Euler–Maruyama integrator.
//!
//! State layouts: SGD `x = θ`; RMSprop `x = (θ, u)`; Adam `x = (θ, m, u)`.
//! All systems are driven by a `d`-dimensional Brownian motion.
//!
//! RMSprop: `dθ = −P⁻¹∇f dt + P⁻¹σ₀Σ^{1/2} dW`, `du = c₂(diag Σ − u) dt`,
//! with `P = σ₀ diag(√u) + ε₀ I`. The θ noise is written with a plus sign;
//! Brownian increments are symmetric so the law is unchanged.
//!
//! Adam: `dθ = −(√γ₂/γ₁) P⁻¹ m dt`, `dm = c₁(∇f − m) dt + σ₀c₁Σ^{1/2} dW`,
//! `du = c₂(diag Σ − u) dt`, with `P = σ₀ diag(√u) + ε₀√γ₂ I` and
//! `γᵢ(t) = 1 − e^{−cᵢt}`.

mod integrator;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, invalid, Error, Result};
use crate::optimizers::{Algorithm, HyperParams, OptimizerState};
use crate::problems::{CovarianceSpec, Problem};

pub use crate::linalg::psd_sqrt;
pub use integrator::{em_endpoint, euler_maruyama, run_sde, EmGrid};

/// Constants shared by a discrete method and its SDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SdeConstants {
    pub sigma0: f64,
    pub epsilon0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SdeConstants {
    /// `σ₀ = ση`, `ε₀ = εη`, `c₂ = (1−β)/η²` (`c₁ = 0`).
    pub fn from_rmsprop(hp: &HyperParams, sigma: f64) -> Self {
        let e2 = hp.eta * hp.eta;
        Self {
            sigma0: sigma * hp.eta,
            epsilon0: hp.epsilon * hp.eta,
            c1: 0.0,
            c2: (1.0 - hp.beta) / e2,
        }
    }

    /// `σ₀ = ση`, `ε₀ = εη`, `c₁ = (1−β₁)/η²`, `c₂ = (1−β₂)/η²`.
    pub fn from_adam(hp: &HyperParams, sigma: f64) -> Self {
        let e2 = hp.eta * hp.eta;
        Self {
            sigma0: sigma * hp.eta,
            epsilon0: hp.epsilon * hp.eta,
            c1: (1.0 - hp.beta1) / e2,
            c2: (1.0 - hp.beta2) / e2,
        }
    }

    pub fn from_discrete(algo: Algorithm, hp: &HyperParams, sigma: f64) -> Result<Self> {
        match algo {
            Algorithm::Rmsprop => Ok(Self::from_rmsprop(hp, sigma)),
            Algorithm::Adam => Ok(Self::from_adam(hp, sigma)),
            Algorithm::Sgd => Err(Error::Unsupported("SGD has no adaptive SDE constants".into())),
        }
    }

    /// Discrete hyperparameters and noise scale `σ = σ₀/η` realising these
    /// constants at learning rate `eta`.
    pub fn to_discrete(&self, algo: Algorithm, eta: f64) -> Result<(HyperParams, f64)> {
        let e2 = eta * eta;
        let eps = self.epsilon0 / eta;
        let hp = match algo {
            Algorithm::Rmsprop => HyperParams::rmsprop(eta, 1.0 - self.c2 * e2, eps),
            Algorithm::Adam => HyperParams::adam(eta, 1.0 - self.c1 * e2, 1.0 - self.c2 * e2, eps),
            Algorithm::Sgd => return Err(Error::Unsupported("SGD has no adaptive SDE constants".into())),
        };
        hp.validate()?;
        Ok((hp, self.sigma0 / eta))
    }
}

type DriftFn = dyn Fn(&[f64], f64) -> DVector<f64> + Send + Sync;
type DiffusionFn = dyn Fn(&[f64], f64) -> DMatrix<f64> + Send + Sync;

#[derive(Clone)]
enum Model {
    Sgd {
        problem: Arc<Problem>,
        cov: CovarianceSpec,
        eta: f64,
        sigma: f64,
    },
    Rmsprop {
        problem: Arc<Problem>,
        cov: CovarianceSpec,
        k: SdeConstants,
    },
    Adam {
        problem: Arc<Problem>,
        cov: CovarianceSpec,
        k: SdeConstants,
    },
    Custom {
        state_dim: usize,
        noise_dim: usize,
        drift: Arc<DriftFn>,
        diffusion: Arc<DiffusionFn>,
    },
}

/// Time-dependent drift `b(x, t)` and diffusion `σ(x, t)`.
#[derive(Clone)]
pub struct SdeSystem {
    model: Model,
    u_min: Option<f64>,
}

impl fmt::Debug for SdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match &self.model {
            Model::Sgd { .. } => "sgd",
            Model::Rmsprop { .. } => "rmsprop",
            Model::Adam { .. } => "adam",
            Model::Custom { .. } => "custom",
        };
        f.debug_struct("SdeSystem")
            .field("model", &tag)
            .field("state_dim", &self.state_dim())
            .field("constants", &self.constants())
            .field("u_min", &self.u_min)
            .finish()
    }
}

/// Nonzero rows of a diffusion matrix: `σ[row_offset .. row_offset + block.nrows(), :] = block`.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffusion {
    pub row_offset: usize,
    pub block: DMatrix<f64>,
}

impl Diffusion {
    pub fn to_dense(&self, state_dim: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(state_dim, self.block.ncols());
        out.view_mut((self.row_offset, 0), self.block.shape())
            .copy_from(&self.block);
        out
    }
}

/// `γ(t) = 1 − e^{−ct}`.
pub fn gamma(c: f64, t: f64) -> f64 {
    -(-c * t).exp_m1()
}

/// Smooth step: 0 for `z ≤ 0`, 1 for `z ≥ 1`, `1/(1 + e^{1/z − 1/(1−z)})` between.
pub fn transition_tau(z: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z >= 1.0 {
        1.0
    } else {
        1.0 / (1.0 + (1.0 / z - 1.0 / (1.0 - z)).exp())
    }
}

/// `μ(u) = ½u_min + τ(2u/u_min − 1)(u − ½u_min)`; returns `u` itself when `u ≥ u_min`.
pub fn clamp_mu(u: f64, u_min: f64) -> f64 {
    if u >= u_min {
        return u;
    }
    let half = 0.5 * u_min;
    half + transition_tau(2.0 * u / u_min - 1.0) * (u - half)
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be > 0, got {v}")))
    }
}

fn check_constants(k: &SdeConstants, need_c1: bool) -> Result<()> {
    check_positive("sigma0", k.sigma0)?;
    check_positive("c2", k.c2)?;
    if need_c1 {
        check_positive("c1", k.c1)?;
    }
    if !(k.epsilon0 >= 0.0 && k.epsilon0.is_finite()) {
        return Err(invalid("epsilon0", format!("must be >= 0, got {}", k.epsilon0)));
    }
    Ok(())
}

pub fn build_rmsprop_sde(
    problem: Arc<Problem>,
    cov: CovarianceSpec,
    sigma0: f64,
    epsilon0: f64,
    c2: f64,
) -> Result<SdeSystem> {
    let k = SdeConstants {
        sigma0,
        epsilon0,
        c1: 0.0,
        c2,
    };
    check_constants(&k, false)?;
    cov.validate_for(&problem)?;
    Ok(SdeSystem {
        model: Model::Rmsprop { problem, cov, k },
        u_min: None,
    })
}

pub fn build_adam_sde(
    problem: Arc<Problem>,
    cov: CovarianceSpec,
    sigma0: f64,
    epsilon0: f64,
    c1: f64,
    c2: f64,
) -> Result<SdeSystem> {
    let k = SdeConstants {
        sigma0,
        epsilon0,
        c1,
        c2,
    };
    check_constants(&k, true)?;
    cov.validate_for(&problem)?;
    Ok(SdeSystem {
        model: Model::Adam { problem, cov, k },
        u_min: None,
    })
}

/// `dX = −∇f dt + √η Σ^{1/2} dW`, with `Σ` the covariance of the gradient noise.
pub fn build_sgd_sde(problem: Arc<Problem>, cov: CovarianceSpec, eta: f64) -> Result<SdeSystem> {
    build_sgd_sde_scaled(problem, cov, eta, 1.0)
}

/// As [`build_sgd_sde`] for noise `σz` with `Cov z = Σ`: diffusion `√η σ Σ^{1/2}`.
pub fn build_sgd_sde_scaled(problem: Arc<Problem>, cov: CovarianceSpec, eta: f64, sigma: f64) -> Result<SdeSystem> {
    check_positive("eta", eta)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", format!("must be >= 0, got {sigma}")));
    }
    cov.validate_for(&problem)?;
    Ok(SdeSystem {
        model: Model::Sgd {
            problem,
            cov,
            eta,
            sigma,
        },
        u_min: None,
    })
}

/// Replaces `√uᵢ` by `√μ(uᵢ)` in every denominator of an adaptive system.
pub fn build_auxiliary_sde(system: &SdeSystem, u_min: f64) -> Result<SdeSystem> {
    check_positive("u_min", u_min)?;
    if !system.is_adaptive() {
        return Err(Error::Unsupported(
            "clamping applies to RMSprop and Adam systems".into(),
        ));
    }
    Ok(SdeSystem {
        model: system.model.clone(),
        u_min: Some(u_min),
    })
}

impl SdeSystem {
    /// A user-defined system with `noise_dim`-dimensional Brownian motion.
    pub fn custom<F, G>(state_dim: usize, noise_dim: usize, drift: F, diffusion: G) -> Self
    where
        F: Fn(&[f64], f64) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(&[f64], f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            model: Model::Custom {
                state_dim,
                noise_dim,
                drift: Arc::new(drift),
                diffusion: Arc::new(diffusion),
            },
            u_min: None,
        }
    }

    /// Parameter dimension `d` (the full state for custom systems).
    pub fn param_dim(&self) -> usize {
        match &self.model {
            Model::Sgd { problem, .. } | Model::Rmsprop { problem, .. } | Model::Adam { problem, .. } => problem.dim(),
            Model::Custom { state_dim, .. } => *state_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        let d = self.param_dim();
        match &self.model {
            Model::Sgd { .. } | Model::Custom { .. } => d,
            Model::Rmsprop { .. } => 2 * d,
            Model::Adam { .. } => 3 * d,
        }
    }

    pub fn noise_dim(&self) -> usize {
        match &self.model {
            Model::Custom { noise_dim, .. } => *noise_dim,
            _ => self.param_dim(),
        }
    }

    pub fn algorithm(&self) -> Option<Algorithm> {
        match &self.model {
            Model::Sgd { .. } => Some(Algorithm::Sgd),
            Model::Rmsprop { .. } => Some(Algorithm::Rmsprop),
            Model::Adam { .. } => Some(Algorithm::Adam),
            Model::Custom { .. } => None,
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.model, Model::Rmsprop { .. } | Model::Adam { .. })
    }

    pub fn constants(&self) -> Option<SdeConstants> {
        match &self.model {
            Model::Rmsprop { k, .. } | Model::Adam { k, .. } => Some(*k),
            _ => None,
        }
    }

    pub fn u_min(&self) -> Option<f64> {
        self.u_min
    }

    /// Offsets of the `m` and `u` blocks within the state.
    pub fn layout(&self) -> (Option<usize>, Option<usize>) {
        let d = self.param_dim();
        match &self.model {
            Model::Rmsprop { .. } => (None, Some(d)),
            Model::Adam { .. } => (Some(d), Some(2 * d)),
            _ => (None, None),
        }
    }

    /// `(√μ(u) or √u)` per coordinate, rejecting `u ≤ 0` when unclamped.
    fn root_u(&self, u: &[f64], t: f64) -> Result<Vec<f64>> {
        u.iter()
            .enumerate()
            .map(|(i, &ui)| match self.u_min {
                Some(m) => Ok(clamp_mu(ui, m).sqrt()),
                None if ui > 0.0 => Ok(ui.sqrt()),
                None => Err(Error::NonPositiveU {
                    index: i,
                    value: ui,
                    time: t,
                }),
            })
            .collect()
    }

    /// Drift and diffusion at `(x, t)`.
    pub fn coefficients(&self, x: &[f64], t: f64) -> Result<(DVector<f64>, Diffusion)> {
        check_dim(self.state_dim(), x.len())?;
        let d = self.param_dim();
        match &self.model {
            Model::Custom { drift, diffusion, .. } => Ok((
                drift(x, t),
                Diffusion {
                    row_offset: 0,
                    block: diffusion(x, t),
                },
            )),
            Model::Sgd {
                problem,
                cov,
                eta,
                sigma,
            } => {
                let theta = DVector::from_column_slice(x);
                let b = -problem.gradient_unchecked(&theta);
                let s = cov.sqrt(problem, &theta)? * (eta.sqrt() * sigma);
                Ok((
                    b,
                    Diffusion {
                        row_offset: 0,
                        block: s,
                    },
                ))
            }
            Model::Rmsprop { problem, cov, k } => {
                let theta = DVector::from_column_slice(&x[..d]);
                let u = &x[d..];
                let ru = self.root_u(u, t)?;
                let grad = problem.gradient_unchecked(&theta);
                let (diag, s) = cov.diag_and_sqrt(problem, &theta)?;
                let mut b = DVector::zeros(2 * d);
                let mut block = s;
                for i in 0..d {
                    let p = k.sigma0 * ru[i] + k.epsilon0;
                    if p == 0.0 {
                        return Err(Error::ZeroDenominator { index: i });
                    }
                    b[i] = -grad[i] / p;
                    b[d + i] = k.c2 * (diag[i] - u[i]);
                    let scale = k.sigma0 / p;
                    block.row_mut(i).iter_mut().for_each(|v| *v *= scale);
                }
                Ok((b, Diffusion { row_offset: 0, block }))
            }
            Model::Adam { problem, cov, k } => {
                if !(t > 0.0) {
                    return Err(invalid("t", format!("Adam SDE needs t > 0, got {t}")));
                }
                let theta = DVector::from_column_slice(&x[..d]);
                let m = &x[d..2 * d];
                let u = &x[2 * d..];
                let ru = self.root_u(u, t)?;
                let g1 = gamma(k.c1, t);
                let g2 = gamma(k.c2, t);
                let sg2 = g2.sqrt();
                let grad = problem.gradient_unchecked(&theta);
                let (diag, s) = cov.diag_and_sqrt(problem, &theta)?;
                let mut b = DVector::zeros(3 * d);
                for i in 0..d {
                    let p = k.sigma0 * ru[i] + k.epsilon0 * sg2;
                    if p == 0.0 {
                        return Err(Error::ZeroDenominator { index: i });
                    }
                    b[i] = -(sg2 / g1) * m[i] / p;
                    b[d + i] = k.c1 * (grad[i] - m[i]);
                    b[2 * d + i] = k.c2 * (diag[i] - u[i]);
                }
                Ok((
                    b,
                    Diffusion {
                        row_offset: d,
                        block: s * (k.sigma0 * k.c1),
                    },
                ))
            }
        }
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        Ok(self.coefficients(x, t)?.0)
    }

    pub fn diffusion(&self, x: &[f64], t: f64) -> Result<Diffusion> {
        Ok(self.coefficients(x, t)?.1)
    }
}

/// Point `(x, t)` of an SDE path.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeState {
    pub x: DVector<f64>,
    pub t: f64,
}

impl SdeState {
    pub fn new(x: DVector<f64>, t: f64) -> Self {
        Self { x, t }
    }

    /// Maps a discrete state to the layout of `algo`'s SDE with `u = v/σ²`
    /// (`u = v` when `σ = 0`).
    pub fn from_optimizer(s: &OptimizerState, algo: Algorithm, sigma: f64, t: f64) -> Self {
        let scale = if sigma == 0.0 { 1.0 } else { 1.0 / (sigma * sigma) };
        let u = s.v.map(|v| v * scale);
        let x = match algo {
            Algorithm::Sgd => s.theta.clone(),
            Algorithm::Rmsprop => stack(&[&s.theta, &u]),
            Algorithm::Adam => stack(&[&s.theta, &s.m, &u]),
        };
        Self { x, t }
    }
}

pub(crate) fn stack(parts: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        parts.iter().map(|p| p.len()).sum(),
        parts.iter().flat_map(|p| p.iter().copied()),
    )
}

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::Status;
use crate::error::{invalid, Result};
use crate::ngos::GradientOracle;
use crate::optimizers::{Algorithm, DiscreteRun, HyperParams, OptimizerState, RngSampler};
use crate::problems::{CovarianceSpec, Problem};
use crate::record::TestFunctionSet;
use crate::stats;
use crate::streams::path_rng;

/// Relative tolerance for the large-σ approximation of the closed form.
pub const APPROX_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarmupCoordinate {
    pub g_bar: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub exact_mean: f64,
    pub mean_z: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub exact_variance: f64,
    pub variance_z: f64,
    /// `−(kη/σ) ḡ`.
    pub approx_mean: f64,
    /// `kη²`.
    pub approx_variance: f64,
    /// `|approx − exact| / |approx|` (0 when both vanish).
    pub mean_residual: f64,
    pub variance_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormReport {
    pub sigma: f64,
    pub eta: f64,
    pub k: u64,
    pub seeds: usize,
    pub coordinates: Vec<WarmupCoordinate>,
    pub max_abs_z: f64,
    pub max_residual: f64,
    pub status: Status,
}

fn rel_residual(approx: f64, exact: f64) -> f64 {
    if approx == exact {
        0.0
    } else {
        (approx - exact).abs() / approx.abs()
    }
}

/// Frozen-preconditioner RMSprop on a linear loss: `β = 1`, `ε = 0`,
/// `v₀ = ḡ² + σ²`, isotropic Gaussian noise, `θ₀ = 0`. After `k` steps
/// θ is exactly Gaussian, which this compares against the simulation.
pub fn linear_warmup_check(
    g_bar: &DVector<f64>,
    sigma: f64,
    eta: f64,
    k_max: u64,
    seeds: usize,
    cell_seed: u64,
) -> Result<ClosedFormReport> {
    let gmax = g_bar.amax();
    if !(sigma >= 100.0 * gmax) || !(sigma > 0.0) {
        return Err(invalid("sigma", format!("must be ≥ 100·max|ḡ| = {}", 100.0 * gmax)));
    }
    if !(eta > 0.0) {
        return Err(invalid("eta", "must be > 0"));
    }
    if seeds < 2 {
        return Err(invalid("seeds", "at least 2 seeds are required"));
    }
    let d = g_bar.len();
    let problem = Arc::new(Problem::linear(g_bar.clone())?);
    let cov = CovarianceSpec::isotropic(1.0)?;
    let oracle = GradientOracle::gaussian(problem.clone(), cov.clone(), sigma)?;
    let hp = HyperParams::rmsprop(eta, 1.0, 0.0);
    let v0 = g_bar.map(|g| g * g + sigma * sigma);
    let init = OptimizerState::new(DVector::zeros(d), v0.clone())?;
    let fns = TestFunctionSet::new(problem, cov, vec![])?;
    let run = DiscreteRun {
        oracle: &oracle,
        algo: Algorithm::Rmsprop,
        hp,
        init: &init,
        steps: k_max,
        fns: &fns,
        checkpoints: &[],
    };
    let finals = (0..seeds as u64)
        .into_par_iter()
        .map(|s| {
            run.final_state(&mut RngSampler(path_rng(cell_seed, s)))
                .map(|st| st.theta)
        })
        .collect::<Result<Vec<_>>>()?;

    let k = k_max as f64;
    let n = seeds as f64;
    let coordinates: Vec<WarmupCoordinate> = (0..d)
        .map(|i| {
            let xs: Vec<f64> = finals.iter().map(|t| t[i]).collect();
            let (mean, mean_se) = stats::mean_se(&xs);
            let variance = stats::variance(&xs);
            let m4 = stats::pairwise_sum(&xs.iter().map(|x| (x - mean).powi(4)).collect::<Vec<_>>()) / n;
            let variance_se = ((m4 - variance * variance).max(0.0) / n).sqrt();
            let g = g_bar[i];
            let exact_mean = -k * eta * g / v0[i].sqrt();
            let exact_variance = k * eta * eta * sigma * sigma / v0[i];
            let approx_mean = -k * eta * g / sigma;
            let approx_variance = k * eta * eta;
            WarmupCoordinate {
                g_bar: g,
                mean,
                mean_se,
                exact_mean,
                mean_z: (mean - exact_mean) / mean_se,
                variance,
                variance_se,
                exact_variance,
                variance_z: (variance - exact_variance) / variance_se,
                approx_mean,
                approx_variance,
                mean_residual: rel_residual(approx_mean, exact_mean),
                variance_residual: rel_residual(approx_variance, exact_variance),
            }
        })
        .collect();
    let max_abs_z = coordinates
        .iter()
        .flat_map(|c| [c.mean_z.abs(), c.variance_z.abs()])
        .fold(0.0, f64::max);
    let max_residual = coordinates
        .iter()
        .flat_map(|c| [c.mean_residual, c.variance_residual])
        .fold(0.0, f64::max);
    let status = if max_abs_z <= 4.0 && max_residual <= APPROX_TOL {
        Status::Pass
    } else {
        Status::Fail
    };
    Ok(ClosedFormReport {
        sigma,
        eta,
        k: k_max,
        seeds,
        coordinates,
        max_abs_z,
        max_residual,
        status,
    })
}

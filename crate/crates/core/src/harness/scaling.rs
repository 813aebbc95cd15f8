use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::Status;
use crate::error::{invalid, Result};
use crate::ngos::GradientOracle;
use crate::optimizers::{Algorithm, DiscreteRun, HyperParams, OptimizerState, RngSampler};
use crate::problems::{CovarianceSpec, Problem};
use crate::record::{TestFunction, TestFunctionSet, TrajectoryRecord};
use crate::scaling::{align_checkpoints, check_exact_alignment, ScalingPlan, ScalingRule};
use crate::streams::{derive_seed, path_rng};

/// Base noise of a scaling experiment; the scaled run uses batch `κB` or
/// scale `σ/√κ`.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Minibatch { batch_size: usize },
    Gaussian { cov: CovarianceSpec, sigma: f64 },
}

impl NoiseModel {
    fn oracle(&self, problem: &Arc<Problem>, kappa: f64, plan: Option<&ScalingPlan>) -> Result<GradientOracle> {
        match self {
            Self::Minibatch { batch_size } => {
                let b = match plan {
                    Some(p) => p.scaled_batch(*batch_size)?,
                    None => *batch_size,
                };
                GradientOracle::minibatch(problem.clone(), b)
            }
            Self::Gaussian { cov, sigma } => {
                GradientOracle::gaussian(problem.clone(), cov.clone(), sigma / kappa.sqrt())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalingExperiment {
    pub problem: Arc<Problem>,
    pub noise: NoiseModel,
    pub algo: Algorithm,
    pub base: HyperParams,
    pub rule: ScalingRule,
    pub kappas: Vec<f64>,
    /// Optional second rule run side by side (e.g. a linear rule).
    pub contrast: Option<ScalingRule>,
    pub theta0: DVector<f64>,
    /// Initial `u`; each run starts from `v₀ = u₀σ²` for its own σ.
    pub u0: DVector<f64>,
    /// Base-run checkpoints; each must be a multiple of every κ.
    pub checkpoint_steps: Vec<u64>,
    pub seeds: usize,
    pub fns: Vec<TestFunction>,
    /// Base steps run once per seed and shared by both runs (Adam warm start).
    pub shared_prefix: Option<u64>,
    pub z_threshold: f64,
    pub root_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub t: f64,
    pub function: String,
    pub base_k: u64,
    pub scaled_k: u64,
    pub mean_base: f64,
    pub se_base: f64,
    pub mean_scaled: f64,
    pub se_scaled: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaReport {
    pub kappa: f64,
    pub plan: ScalingPlan,
    pub rows: Vec<ScalingRow>,
    pub max_abs_z: f64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub algorithm: Algorithm,
    pub z_threshold: f64,
    pub kappas: Vec<KappaReport>,
    /// Same layout for the contrast rule; does not affect `status`.
    pub contrast: Vec<KappaReport>,
    pub status: Status,
}

fn z_score(a: f64, sa: f64, b: f64, sb: f64) -> f64 {
    let se = sa.hypot(sb);
    let d = b - a;
    if se > 0.0 {
        d / se
    } else if d == 0.0 {
        0.0
    } else {
        d.signum() * f64::INFINITY
    }
}

#[allow(clippy::too_many_arguments)]
fn ensemble(
    oracle: &GradientOracle,
    algo: Algorithm,
    hp: &HyperParams,
    starts: &[OptimizerState],
    steps: u64,
    fns: &TestFunctionSet,
    checkpoints: &[u64],
    cell_seed: u64,
) -> Result<TrajectoryRecord> {
    let paths = starts
        .par_iter()
        .enumerate()
        .map(|(s, init)| {
            DiscreteRun {
                oracle,
                algo,
                hp: *hp,
                init,
                steps,
                fns,
                checkpoints,
            }
            .path(&mut RngSampler(path_rng(cell_seed, s as u64)))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryRecord::from_paths(fns.names(), (0..starts.len() as u64).collect(), paths)
}

fn rescale_v(s: &OptimizerState, from_sigma: f64, to_sigma: f64, k: u64) -> OptimizerState {
    let mut out = s.clone();
    if from_sigma > 0.0 {
        out.v *= (to_sigma / from_sigma).powi(2);
    }
    out.k = k;
    out
}

/// Runs the base configuration once and the scaled configuration for every
/// κ, comparing test-function means at aligned checkpoints.
pub fn validate_scaling(exp: &ScalingExperiment) -> Result<ScalingReport> {
    if exp.seeds < 2 {
        return Err(invalid("seeds", "at least 2 seeds are required"));
    }
    if exp.checkpoint_steps.is_empty() || exp.checkpoint_steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("checkpoint_steps", "must be non-empty and strictly increasing"));
    }
    let k0 = exp.shared_prefix.unwrap_or(0);
    if exp.checkpoint_steps[0] < k0 {
        return Err(invalid("checkpoint_steps", "must not precede the shared prefix"));
    }
    // Validate every plan and alignment before any simulation.
    let mut plans = Vec::new();
    for &kappa in &exp.kappas {
        let plan = ScalingPlan::new(exp.rule, exp.base, kappa)?;
        let contrast = exp.contrast.map(|r| ScalingPlan::new(r, exp.base, kappa)).transpose()?;
        let pairs = align_checkpoints(&exp.checkpoint_steps, kappa, exp.base.eta, exp.algo)?;
        check_exact_alignment(&pairs, kappa)?;
        check_exact_alignment(&align_checkpoints(&[k0], kappa, exp.base.eta, exp.algo)?, kappa)?;
        plans.push((plan, contrast, pairs));
    }

    let oracle_for = |kappa: f64, plan: Option<&ScalingPlan>| exp.noise.oracle(&exp.problem, kappa, plan);
    let base_oracle = oracle_for(1.0, None)?;
    let fns = TestFunctionSet::new(exp.problem.clone(), base_oracle.covariance_spec(), exp.fns.clone())?;
    let sigma = base_oracle.sigma_effective();
    let init = OptimizerState::new(exp.theta0.clone(), &exp.u0 * (sigma * sigma))?;
    let starts: Vec<OptimizerState> = if k0 > 0 {
        let prefix_seed = derive_seed(exp.root_seed, "scaling/prefix");
        (0..exp.seeds as u64)
            .into_par_iter()
            .map(|s| {
                DiscreteRun {
                    oracle: &base_oracle,
                    algo: exp.algo,
                    hp: exp.base,
                    init: &init,
                    steps: k0,
                    fns: &fns,
                    checkpoints: &[],
                }
                .final_state(&mut RngSampler(path_rng(prefix_seed, s)))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![init.clone(); exp.seeds]
    };
    let last = *exp.checkpoint_steps.last().unwrap();
    let rel: Vec<u64> = exp.checkpoint_steps.iter().map(|k| k - k0).collect();
    let base = ensemble(
        &base_oracle,
        exp.algo,
        &exp.base,
        &starts,
        last - k0,
        &fns,
        &rel,
        derive_seed(exp.root_seed, "scaling/base"),
    )?;

    let scaled_report =
        |plan: &ScalingPlan, pairs: &[crate::scaling::AlignedPair], label: &str| -> Result<KappaReport> {
            let kappa = plan.kappa;
            let oracle = oracle_for(kappa, Some(plan))?;
            let s_sigma = oracle.sigma_effective();
            let k0s = plan.step_map(k0);
            let s_starts: Vec<OptimizerState> = starts.iter().map(|s| rescale_v(s, sigma, s_sigma, k0s)).collect();
            let s_rel: Vec<u64> = pairs.iter().map(|p| p.scaled_k - k0s).collect();
            let scaled = ensemble(
                &oracle,
                exp.algo,
                &plan.scaled,
                &s_starts,
                plan.step_map(last) - k0s,
                &fns,
                &s_rel,
                derive_seed(exp.root_seed, &format!("scaling/{label}/kappa={kappa}")),
            )?;
            let mut rows = Vec::new();
            for (c, p) in pairs.iter().enumerate() {
                for (f, name) in fns.names().into_iter().enumerate() {
                    let (mean_base, se_base) = base.mean_se(f, c);
                    let (mean_scaled, se_scaled) = scaled.mean_se(f, c);
                    rows.push(ScalingRow {
                        t: p.t,
                        function: name,
                        base_k: p.base_k,
                        scaled_k: p.scaled_k,
                        mean_base,
                        se_base,
                        mean_scaled,
                        se_scaled,
                        z: z_score(mean_base, se_base, mean_scaled, se_scaled),
                    });
                }
            }
            let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
            Ok(KappaReport {
                kappa,
                plan: *plan,
                rows,
                max_abs_z,
                status: if max_abs_z <= exp.z_threshold {
                    Status::Pass
                } else {
                    Status::Fail
                },
            })
        };

    let mut kappas = Vec::new();
    let mut contrast = Vec::new();
    for (plan, cplan, pairs) in &plans {
        kappas.push(scaled_report(plan, pairs, "rule")?);
        if let Some(c) = cplan {
            contrast.push(scaled_report(c, pairs, "contrast")?);
        }
    }
    Ok(ScalingReport {
        algorithm: exp.algo,
        z_threshold: exp.z_threshold,
        status: Status::combine(kappas.iter().map(|k| k.status)),
        kappas,
        contrast,
    })
}

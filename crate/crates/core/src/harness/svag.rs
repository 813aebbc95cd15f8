use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::weak::max_gaps;
use super::Status;
use crate::error::{invalid, Result};
use crate::ngos::{apply_svag_operator, GradientOracle};
use crate::optimizers::{run_discrete, svag_transform_hparams, Algorithm, HyperParams, OptimizerState};
use crate::record::{TestFunction, TestFunctionSet, TrajectoryRecord};
use crate::stats;
use crate::streams::derive_seed;

/// SVAG ℓ-sweep around a base discrete configuration.
#[derive(Debug, Clone)]
pub struct SvagSweepConfig {
    pub oracle: GradientOracle,
    pub algo: Algorithm,
    pub hp: HyperParams,
    pub theta0: DVector<f64>,
    /// Initial `u`; each ℓ starts from `v₀ = u₀(ℓσ)²`.
    pub u0: DVector<f64>,
    /// Base step counts `k` (at ℓ = 1) where traces are compared; the
    /// matched time is `k η²`.
    pub checkpoint_steps: Vec<u64>,
    /// Sorted, starting at 1, with integer `ℓ² k` for every checkpoint.
    pub ells: Vec<f64>,
    pub seeds: usize,
    pub fns: Vec<TestFunction>,
    pub bootstrap: usize,
    pub root_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discrepancy {
    pub ell_a: f64,
    pub ell_b: f64,
    pub max_gap: f64,
    pub se: f64,
    pub argmax_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SvagFunctionReport {
    pub name: String,
    /// `means[ℓ index][checkpoint]`.
    pub means: Vec<Vec<f64>>,
    pub ses: Vec<Vec<f64>>,
    pub discrepancies: Vec<Discrepancy>,
    pub strictly_decreasing: bool,
    /// Slope of discrepancy against `1/ℓ²` (positive means decay).
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SvagReport {
    pub algorithm: Algorithm,
    pub ells: Vec<f64>,
    pub times: Vec<f64>,
    pub functions: Vec<SvagFunctionReport>,
    pub status: Status,
    #[serde(skip)]
    pub records: Vec<TrajectoryRecord>,
}

impl SvagReport {
    pub fn function(&self, name: &str) -> Option<&SvagFunctionReport> {
        self.functions.iter().find(|f| f.name == name)
    }
}

/// Cell seed used for the run at `ell`.
pub fn svag_cell_seed(root: u64, ell: f64) -> u64 {
    derive_seed(root, &format!("svag/ell={ell}"))
}

pub(crate) fn validate(cfg: &SvagSweepConfig) -> Result<()> {
    if cfg.ells.first() != Some(&1.0) {
        return Err(invalid("ells", "must start with ℓ = 1"));
    }
    if cfg.ells.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("ells", "must be strictly increasing"));
    }
    if cfg.checkpoint_steps.is_empty() || cfg.checkpoint_steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("checkpoint_steps", "must be non-empty and strictly increasing"));
    }
    if cfg.seeds < 2 {
        return Err(invalid("seeds", "at least 2 seeds are required"));
    }
    Ok(())
}

fn scaled_steps(k: u64, ell: f64) -> Result<u64> {
    let s = k as f64 * ell * ell;
    if (s - s.round()).abs() > 1e-9 * s.max(1.0) {
        return Err(invalid("ells", format!("ℓ² k must be an integer (ℓ = {ell}, k = {k})")));
    }
    Ok(s.round() as u64)
}

fn run_ell(cfg: &SvagSweepConfig, fns: &TestFunctionSet, ell: f64) -> Result<TrajectoryRecord> {
    let hp = svag_transform_hparams(&cfg.hp, ell, cfg.algo)?;
    let oracle = if ell == 1.0 {
        cfg.oracle.clone()
    } else {
        apply_svag_operator(&cfg.oracle, ell)?
    };
    let sigma = oracle.sigma_effective();
    let init = OptimizerState::new(cfg.theta0.clone(), &cfg.u0 * (sigma * sigma))?;
    let cps = cfg
        .checkpoint_steps
        .iter()
        .map(|&k| scaled_steps(k, ell))
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).collect();
    let steps = *cps.last().unwrap_or(&0);
    let mut rec = run_discrete(
        &oracle,
        cfg.algo,
        &hp,
        &init,
        steps,
        fns,
        &cps,
        svag_cell_seed(cfg.root_seed, ell),
        &seeds,
    )?;
    // Report the matched base time exactly rather than k·(η/ℓ)².
    for (c, &k) in rec.checkpoints.iter_mut().zip(&cfg.checkpoint_steps) {
        c.t = cfg.algo.time_per_step(cfg.hp.eta) * k as f64;
    }
    Ok(rec)
}

/// Runs the base configuration at every ℓ and measures how fast successive
/// traces approach each other.
pub fn svag_sweep(cfg: &SvagSweepConfig) -> Result<SvagReport> {
    validate(cfg)?;
    if !cfg.algo.is_adaptive() {
        return Err(invalid("algo", "SVAG sweeps apply to RMSprop and Adam"));
    }
    let problem = cfg.oracle.problem().clone();
    let fns = TestFunctionSet::new(problem, cfg.oracle.covariance_spec(), cfg.fns.clone())?;
    let records = cfg
        .ells
        .iter()
        .map(|&ell| run_ell(cfg, &fns, ell))
        .collect::<Result<Vec<_>>>()?;
    let nf = fns.len();
    let nc = cfg.checkpoint_steps.len();
    let inv_l2: Vec<f64> = cfg.ells[..cfg.ells.len() - 1].iter().map(|l| 1.0 / (l * l)).collect();

    // Bootstrap slopes: every ℓ resampled independently.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.root_seed, "svag/bootstrap"));
    let boot: Vec<Vec<f64>> = (0..cfg.bootstrap)
        .map(|_| {
            let pos: Vec<Vec<usize>> = records
                .iter()
                .map(|r| stats::resample_indices(&mut rng, r.n_seeds()))
                .collect();
            let d: Vec<Vec<f64>> = records
                .windows(2)
                .zip(pos.windows(2))
                .map(|(r, p)| max_gaps(&r[0], &r[1], &p[0], &p[1]))
                .collect();
            (0..nf)
                .map(|f| {
                    let y: Vec<f64> = d.iter().map(|g| g[f]).collect();
                    if y.len() >= 2 {
                        stats::ols(&inv_l2, &y).slope
                    } else {
                        f64::NAN
                    }
                })
                .collect()
        })
        .collect();

    let functions: Vec<SvagFunctionReport> = (0..nf)
        .map(|f| {
            let stat = |r: &TrajectoryRecord| -> (Vec<f64>, Vec<f64>) { (0..nc).map(|c| r.mean_se(f, c)).unzip() };
            let (means, ses): (Vec<Vec<f64>>, Vec<Vec<f64>>) = records.iter().map(stat).unzip();
            let discrepancies: Vec<Discrepancy> = (0..records.len() - 1)
                .map(|i| {
                    let (c, gap) = (0..nc)
                        .map(|c| (c, (means[i][c] - means[i + 1][c]).abs()))
                        .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
                    Discrepancy {
                        ell_a: cfg.ells[i],
                        ell_b: cfg.ells[i + 1],
                        max_gap: gap,
                        se: ses[i][c].hypot(ses[i + 1][c]),
                        argmax_t: records[0].checkpoints[c].t,
                    }
                })
                .collect();
            let strictly_decreasing = discrepancies.windows(2).all(|w| w[1].max_gap < w[0].max_gap);
            let y: Vec<f64> = discrepancies.iter().map(|d| d.max_gap).collect();
            let slope = (y.len() >= 2).then(|| stats::ols(&inv_l2, &y).slope);
            let bs: Vec<f64> = boot.iter().map(|b| b[f]).filter(|s| s.is_finite()).collect();
            let slope_se = (bs.len() >= 2).then(|| stats::std_dev(&bs));
            let status = if y.iter().all(|&g| g == 0.0) {
                Status::Undefined
            } else {
                match (slope, slope_se) {
                    (Some(s), Some(se)) if strictly_decreasing && s > 2.0 * se => Status::Pass,
                    (Some(s), Some(se)) if s < -2.0 * se => Status::Fail,
                    _ => {
                        let clear_violation = discrepancies
                            .windows(2)
                            .any(|w| w[1].max_gap - w[0].max_gap > 2.0 * w[0].se.hypot(w[1].se));
                        if clear_violation {
                            Status::Fail
                        } else {
                            Status::Inconclusive
                        }
                    }
                }
            };
            SvagFunctionReport {
                name: fns.functions()[f].name(),
                means,
                ses,
                discrepancies,
                strictly_decreasing,
                slope,
                slope_se,
                status,
            }
        })
        .collect();
    Ok(SvagReport {
        algorithm: cfg.algo,
        ells: cfg.ells.clone(),
        times: records[0].times(),
        status: Status::combine(functions.iter().map(|f| f.status)),
        functions,
        records,
    })
}

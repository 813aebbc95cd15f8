use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::weak::{max_gaps, weak_error, WeakErrorReport};
use super::Status;
use crate::error::{invalid, Result};
use crate::ngos::GradientOracle;
use crate::optimizers::{Algorithm, CoupledSampler, DiscreteRun, HyperParams, OptimizerState, RngSampler};
use crate::problems::{CovarianceSpec, Problem};
use crate::record::{Path, TestFunction, TestFunctionSet, TrajectoryRecord};
use crate::sde::{
    build_adam_sde, build_rmsprop_sde, build_sgd_sde_scaled, euler_maruyama, SdeConstants, SdeState, SdeSystem,
};
use crate::stats;
use crate::streams::{derive_seed, path_rng, Aggregated, RngNormals};

/// η-sweep of discrete runs against a fixed target SDE.
#[derive(Debug, Clone)]
pub struct OrderSweepConfig {
    pub problem: Arc<Problem>,
    pub cov: CovarianceSpec,
    pub algo: Algorithm,
    /// Target SDE constants for RMSprop/Adam; each η uses `σ = σ₀/η`,
    /// `β = 1 − c η²`, `ε = ε₀/η`.
    pub consts: SdeConstants,
    /// Noise scale for SGD (held fixed across η).
    pub sgd_sigma: f64,
    pub theta0: DVector<f64>,
    /// Initial `u` (adaptive algorithms); discrete `v₀ = u₀σ²`.
    pub u0: DVector<f64>,
    pub t_end: f64,
    /// Target checkpoint times, snapped per η to the nearest step.
    pub checkpoint_times: Vec<f64>,
    pub etas: Vec<f64>,
    pub seeds: usize,
    /// Integrator substeps per discrete step.
    pub substeps: u32,
    /// Drive both sides from the same Brownian increments.
    pub coupled: bool,
    /// Adam only: the discrete prefix up to `⌈t₀/η²⌉` steps is shared by
    /// both sides, seed by seed.
    pub warm_start: Option<f64>,
    pub fns: Vec<TestFunction>,
    /// Accepted slope interval.
    pub expected_slope: (f64, f64),
    pub bootstrap: usize,
    pub root_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionOrder {
    pub name: String,
    pub max_gaps: Vec<f64>,
    pub gap_ses: Vec<f64>,
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    /// 95% bootstrap interval of the slope.
    pub ci: Option<(f64, f64)>,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub algorithm: Option<Algorithm>,
    pub etas: Vec<f64>,
    pub expected_slope: (f64, f64),
    pub per_eta: Vec<WeakErrorReport>,
    pub functions: Vec<FunctionOrder>,
    pub status: Status,
}

impl OrderReport {
    pub fn function(&self, name: &str) -> Option<&FunctionOrder> {
        self.functions.iter().find(|f| f.name == name)
    }
}

pub(crate) fn coupling_sign(algo: Algorithm) -> f64 {
    // The discrete gradient noise enters θ with the opposite sign to the SDE
    // diffusion for SGD and RMSprop, and through m (same sign) for Adam.
    match algo {
        Algorithm::Adam => 1.0,
        Algorithm::Sgd | Algorithm::Rmsprop => -1.0,
    }
}

/// One η of a discrete-vs-SDE comparison.
pub(crate) struct Cell {
    pub(crate) oracle: GradientOracle,
    pub(crate) hp: HyperParams,
    pub(crate) sigma: f64,
    pub(crate) system: SdeSystem,
    pub(crate) init: OptimizerState,
    pub(crate) prefix_steps: u64,
    pub(crate) steps: u64,
    pub(crate) rel_checkpoints: Vec<u64>,
    pub(crate) times: Vec<f64>,
    pub(crate) ets: f64,
}

impl OrderSweepConfig {
    /// Checks the sweep and every per-η cell without simulating.
    pub fn check(&self) -> Result<()> {
        self.validate()?;
        for &eta in &self.etas {
            self.cell(eta)?;
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.etas.len() < 3 {
            return Err(invalid("etas", "at least 3 learning rates are required"));
        }
        let mut sorted = self.etas.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] / w[0] < 1.4 - 1e-12) {
            return Err(invalid(
                "etas",
                "consecutive values must differ by a factor ≥ 1.4 (≈ √2)",
            ));
        }
        if self.seeds < 2 {
            return Err(invalid("seeds", "at least 2 seeds are required"));
        }
        if self.substeps == 0 {
            return Err(invalid("substeps", "must be ≥ 1"));
        }
        if !(self.t_end > 0.0) {
            return Err(invalid("t_end", "must be > 0"));
        }
        if self.checkpoint_times.iter().any(|&t| !(0.0..=self.t_end).contains(&t)) {
            return Err(invalid("checkpoint_times", "must lie in [0, t_end]"));
        }
        if self.expected_slope.0 > self.expected_slope.1 {
            return Err(invalid("expected_slope", "lower bound exceeds upper bound"));
        }
        Ok(())
    }

    fn cell(&self, eta: f64) -> Result<Cell> {
        let (hp, sigma) = match self.algo {
            Algorithm::Sgd => (HyperParams::sgd(eta), self.sgd_sigma),
            a => self.consts.to_discrete(a, eta)?,
        };
        let oracle = GradientOracle::gaussian(self.problem.clone(), self.cov.clone(), sigma)?;
        let system = match self.algo {
            Algorithm::Sgd => build_sgd_sde_scaled(self.problem.clone(), self.cov.clone(), eta, sigma)?,
            Algorithm::Rmsprop => build_rmsprop_sde(
                self.problem.clone(),
                self.cov.clone(),
                self.consts.sigma0,
                self.consts.epsilon0,
                self.consts.c2,
            )?,
            Algorithm::Adam => build_adam_sde(
                self.problem.clone(),
                self.cov.clone(),
                self.consts.sigma0,
                self.consts.epsilon0,
                self.consts.c1,
                self.consts.c2,
            )?,
        };
        let d = self.problem.dim();
        let v0 = if self.algo.is_adaptive() {
            if self.u0.len() != d {
                return Err(invalid("u0", format!("expected length {d}")));
            }
            &self.u0 * (sigma * sigma)
        } else {
            DVector::zeros(d)
        };
        let init = OptimizerState::new(self.theta0.clone(), v0)?;
        let ets = self.algo.time_per_step(eta);
        let prefix_steps = match (self.algo, self.warm_start) {
            (Algorithm::Adam, Some(t0)) => (t0 / ets - 1e-9).ceil().max(1.0) as u64,
            (Algorithm::Adam, None) => {
                return Err(invalid("warm_start", "Adam comparisons need a warm-start time t0 > 0"))
            }
            _ => 0,
        };
        let total = (self.t_end / ets).round() as u64;
        if total <= prefix_steps {
            return Err(invalid("t_end", format!("too short for η = {eta}")));
        }
        let mut ks: Vec<u64> = self
            .checkpoint_times
            .iter()
            .map(|&t| ((t / ets).round() as u64).clamp(prefix_steps, total))
            .collect();
        ks.sort_unstable();
        ks.dedup();
        Ok(Cell {
            oracle,
            hp,
            sigma,
            system,
            init,
            prefix_steps,
            steps: total - prefix_steps,
            rel_checkpoints: ks.iter().map(|k| k - prefix_steps).collect(),
            times: ks.iter().map(|&k| k as f64 * ets).collect(),
            ets,
        })
    }
}

/// Discrete and SDE ensembles of one cell, paired by seed.
pub(crate) fn run_cell(
    algo: Algorithm,
    n_seeds: usize,
    substeps: u32,
    coupled: bool,
    cell: &Cell,
    fns: &TestFunctionSet,
    cell_seed: u64,
) -> Result<(TrajectoryRecord, TrajectoryRecord)> {
    let seeds: Vec<u64> = (0..n_seeds as u64).collect();
    let dt = cell.ets / substeps as f64;
    let substeps = substeps as usize;
    let prefix_seed = derive_seed(cell_seed, "prefix");
    let sign = coupling_sign(algo);
    let pairs = seeds
        .par_iter()
        .map(|&s| -> Result<(Path, Path)> {
            let start = if cell.prefix_steps > 0 {
                let prefix = DiscreteRun {
                    oracle: &cell.oracle,
                    algo,
                    hp: cell.hp,
                    init: &cell.init,
                    steps: cell.prefix_steps,
                    fns,
                    checkpoints: &[],
                };
                prefix.final_state(&mut RngSampler(path_rng(prefix_seed, s)))?
            } else {
                cell.init.clone()
            };
            let run = DiscreteRun {
                oracle: &cell.oracle,
                algo,
                hp: cell.hp,
                init: &start,
                steps: cell.steps,
                fns,
                checkpoints: &cell.rel_checkpoints,
            };
            let t0 = start.k as f64 * cell.ets;
            let t_end = (start.k + cell.steps) as f64 * cell.ets;
            let x0 = SdeState::from_optimizer(&start, algo, cell.sigma, t0);
            if coupled {
                let mut sampler =
                    CoupledSampler::new(Aggregated::new(RngNormals(path_rng(cell_seed, s)), substeps), sign);
                let discrete = run.path(&mut sampler)?;
                let mut noise = RngNormals(path_rng(cell_seed, s));
                let sde = euler_maruyama(&cell.system, &x0, t_end, dt, fns, &cell.times, &mut noise)?;
                Ok((discrete, sde))
            } else {
                let discrete = run.path(&mut RngSampler(path_rng(derive_seed(cell_seed, "discrete"), s)))?;
                let mut noise = RngNormals(path_rng(derive_seed(cell_seed, "sde"), s));
                let sde = euler_maruyama(&cell.system, &x0, t_end, dt, fns, &cell.times, &mut noise)?;
                Ok((discrete, sde))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (d, s): (Vec<Path>, Vec<Path>) = pairs.into_iter().unzip();
    Ok((
        TrajectoryRecord::from_paths(fns.names(), seeds.clone(), d)?,
        TrajectoryRecord::from_paths(fns.names(), seeds, s)?,
    ))
}

/// Runs the sweep: for each η, discrete and SDE ensembles, their weak error,
/// and a log–log slope fit per test function.
pub fn order_sweep(cfg: &OrderSweepConfig) -> Result<OrderReport> {
    cfg.validate()?;
    let fns = TestFunctionSet::new(cfg.problem.clone(), cfg.cov.clone(), cfg.fns.clone())?;
    let mut pairs = Vec::with_capacity(cfg.etas.len());
    for &eta in &cfg.etas {
        let cell = cfg.cell(eta)?;
        let cell_seed = derive_seed(cfg.root_seed, &format!("order/{}/eta={eta}", cfg.algo.name()));
        pairs.push(run_cell(
            cfg.algo,
            cfg.seeds,
            cfg.substeps,
            cfg.coupled,
            &cell,
            &fns,
            cell_seed,
        )?);
    }
    let mut report = order_from_records(
        &cfg.etas,
        &pairs,
        cfg.coupled,
        cfg.expected_slope,
        cfg.bootstrap,
        derive_seed(cfg.root_seed, "order/bootstrap"),
    )?;
    report.algorithm = Some(cfg.algo);
    Ok(report)
}

/// Fits `log(max gap)` against `log η` from precomputed `(discrete, sde)`
/// record pairs, one per η.
pub fn order_from_records(
    etas: &[f64],
    pairs: &[(TrajectoryRecord, TrajectoryRecord)],
    paired: bool,
    expected_slope: (f64, f64),
    bootstrap: usize,
    bootstrap_seed: u64,
) -> Result<OrderReport> {
    if etas.len() != pairs.len() || etas.len() < 2 {
        return Err(invalid("etas", "need one record pair per η and at least two η"));
    }
    let per_eta = etas
        .iter()
        .zip(pairs)
        .map(|(&eta, (a, b))| weak_error(a, b, eta, paired))
        .collect::<Result<Vec<_>>>()?;
    let log_eta: Vec<f64> = etas.iter().map(|e| e.ln()).collect();
    let nf = per_eta[0].functions.len();

    let boot: Vec<Vec<Option<f64>>> = {
        let mut rng = ChaCha8Rng::seed_from_u64(bootstrap_seed);
        (0..bootstrap)
            .map(|_| {
                let gaps: Vec<Vec<f64>> = pairs
                    .iter()
                    .map(|(a, b)| {
                        let pa = stats::resample_indices(&mut rng, a.n_seeds());
                        if paired {
                            max_gaps(a, b, &pa, &pa)
                        } else {
                            let pb = stats::resample_indices(&mut rng, b.n_seeds());
                            max_gaps(a, b, &pa, &pb)
                        }
                    })
                    .collect();
                (0..nf)
                    .map(|f| {
                        let y: Vec<f64> = gaps.iter().map(|g| g[f]).collect();
                        y.iter().all(|&g| g > 0.0).then(|| {
                            let ly: Vec<f64> = y.iter().map(|g| g.ln()).collect();
                            stats::ols(&log_eta, &ly).slope
                        })
                    })
                    .collect()
            })
            .collect()
    };

    let functions: Vec<FunctionOrder> = (0..nf)
        .map(|f| {
            let name = per_eta[0].functions[f].name.clone();
            let max_gaps: Vec<f64> = per_eta.iter().map(|r| r.functions[f].max_gap).collect();
            let gap_ses: Vec<f64> = per_eta.iter().map(|r| r.functions[f].max_gap_se).collect();
            if max_gaps.iter().all(|&g| g == 0.0) {
                return FunctionOrder {
                    name,
                    max_gaps,
                    gap_ses,
                    slope: None,
                    slope_se: None,
                    ci: None,
                    status: Status::Undefined,
                };
            }
            let noisy = max_gaps.iter().zip(&gap_ses).any(|(g, s)| *g < 2.0 * s);
            let fit = max_gaps.iter().all(|&g| g > 0.0).then(|| {
                let ly: Vec<f64> = max_gaps.iter().map(|g| g.ln()).collect();
                stats::ols(&log_eta, &ly)
            });
            let slopes: Vec<f64> = boot.iter().filter_map(|b| b[f]).collect();
            let ci = (slopes.len() >= 2).then(|| (stats::quantile(&slopes, 0.025), stats::quantile(&slopes, 0.975)));
            let slope = fit.map(|l| l.slope);
            let status = match slope {
                _ if noisy => Status::Inconclusive,
                None => Status::Inconclusive,
                Some(s) if s >= expected_slope.0 && s <= expected_slope.1 => Status::Pass,
                Some(_) => Status::Fail,
            };
            FunctionOrder {
                name,
                max_gaps,
                gap_ses,
                slope,
                slope_se: (slopes.len() >= 2).then(|| stats::std_dev(&slopes)),
                ci,
                status,
            }
        })
        .collect();
    let status = Status::combine(functions.iter().map(|f| f.status));
    Ok(OrderReport {
        algorithm: None,
        etas: etas.to_vec(),
        expected_slope,
        per_eta,
        functions,
        status,
    })
}

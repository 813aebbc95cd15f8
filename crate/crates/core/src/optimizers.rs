//! Discrete SGD, RMSprop and Adam, the SVAG hyperparameter transform and the
//! trajectory runner.
//!
//! RMSprop and Adam divide by the *pre-update* second moment `v_k`:
//!
//! ```text
//! RMSprop: θ' = θ − η g / (√v + ε),          v' = β v + (1−β) g²
//! Adam:    m' = β₁ m + (1−β₁) g,             v' = β₂ v + (1−β₂) g²
//!          θ' = θ − η m̂' / (√v̂ + ε),  m̂' = m'/(1−β₁^{k+1}),  v̂ = v/(1−β₂^k)
//! ```
//!
//! Adam at `k = 0` uses `v̂ = v` since `1 − β₂⁰ = 0`.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::ngos::GradientOracle;
use crate::record::{Path, StateView, TestFunctionSet, TrajectoryRecord};
use crate::streams::{path_rng, NormalStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Rmsprop,
    Adam,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "rmsprop" => Ok(Self::Rmsprop),
            "adam" => Ok(Self::Adam),
            _ => Err(invalid("algo", format!("unknown algorithm `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Rmsprop => "rmsprop",
            Self::Adam => "adam",
        }
    }

    pub fn is_adaptive(&self) -> bool {
        !matches!(self, Self::Sgd)
    }

    /// Continuous time advanced by one step: η for SGD, η² otherwise.
    pub fn time_per_step(&self, eta: f64) -> f64 {
        match self {
            Self::Sgd => eta,
            _ => eta * eta,
        }
    }
}

/// Learning rate, decays and ε. Unused fields are ignored by each algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl HyperParams {
    pub fn sgd(eta: f64) -> Self {
        Self {
            eta,
            beta: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
        }
    }

    pub fn rmsprop(eta: f64, beta: f64, epsilon: f64) -> Self {
        Self {
            beta,
            epsilon,
            ..Self::sgd(eta)
        }
    }

    pub fn adam(eta: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            ..Self::sgd(eta)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid("eta", format!("must be > 0, got {}", self.eta)));
        }
        for (name, b) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(invalid(name, format!("{name} out of [0,1]: {b}")));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("epsilon", format!("must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Discrete iterate `(θ_k, m_k, v_k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub theta: DVector<f64>,
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub k: u64,
}

impl OptimizerState {
    /// `m = 0`, `k = 0`.
    pub fn new(theta: DVector<f64>, v: DVector<f64>) -> Result<Self> {
        check_dim(theta.len(), v.len())?;
        if v.iter().any(|x| !(*x >= 0.0)) {
            return Err(invalid("v0", "second-moment estimate must be >= 0"));
        }
        let m = DVector::zeros(theta.len());
        Ok(Self { theta, m, v, k: 0 })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Checks the invariants required by `algo` under `hp`.
    pub fn validate(&self, algo: Algorithm, hp: &HyperParams) -> Result<()> {
        check_dim(self.dim(), self.m.len())?;
        check_dim(self.dim(), self.v.len())?;
        if algo.is_adaptive() {
            if self.v.iter().any(|x| !(*x >= 0.0)) {
                return Err(invalid("v0", "second-moment estimate must be >= 0"));
            }
            if hp.epsilon == 0.0 && self.v.iter().any(|x| *x == 0.0) {
                return Err(invalid("v0", "must be positive in every coordinate when epsilon = 0"));
            }
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.theta
            .iter()
            .chain(self.m.iter())
            .chain(self.v.iter())
            .all(|x| x.is_finite())
    }
}

/// One RMSprop step in place.
pub fn rmsprop_update(s: &mut OptimizerState, g: &DVector<f64>, hp: &HyperParams) -> Result<()> {
    check_dim(s.dim(), g.len())?;
    for i in 0..s.dim() {
        if s.v[i].sqrt() + hp.epsilon == 0.0 {
            return Err(Error::ZeroDenominator { index: i });
        }
    }
    for i in 0..s.dim() {
        s.theta[i] -= hp.eta * g[i] / (s.v[i].sqrt() + hp.epsilon);
        s.v[i] = hp.beta * s.v[i] + (1.0 - hp.beta) * g[i] * g[i];
    }
    s.k += 1;
    Ok(())
}

/// One Adam step in place.
pub fn adam_update(s: &mut OptimizerState, g: &DVector<f64>, hp: &HyperParams) -> Result<()> {
    check_dim(s.dim(), g.len())?;
    let c1 = 1.0 - hp.beta1.powf((s.k + 1) as f64);
    if c1 == 0.0 {
        return Err(invalid("beta1", "bias correction 1 - beta1^(k+1) vanishes"));
    }
    let c2 = if s.k == 0 { 1.0 } else { 1.0 - hp.beta2.powf(s.k as f64) };
    if c2 == 0.0 {
        return Err(invalid("beta2", "bias correction 1 - beta2^k vanishes"));
    }
    for i in 0..s.dim() {
        if (s.v[i] / c2).sqrt() + hp.epsilon == 0.0 {
            return Err(Error::ZeroDenominator { index: i });
        }
    }
    for i in 0..s.dim() {
        let m = hp.beta1 * s.m[i] + (1.0 - hp.beta1) * g[i];
        let v_hat = s.v[i] / c2;
        s.theta[i] -= hp.eta * (m / c1) / (v_hat.sqrt() + hp.epsilon);
        s.m[i] = m;
        s.v[i] = hp.beta2 * s.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
    }
    s.k += 1;
    Ok(())
}

/// One SGD step in place.
pub fn sgd_update(s: &mut OptimizerState, g: &DVector<f64>, hp: &HyperParams) -> Result<()> {
    check_dim(s.dim(), g.len())?;
    s.theta.axpy(-hp.eta, g, 1.0);
    s.k += 1;
    Ok(())
}

pub fn rmsprop_step(s: &OptimizerState, g: &DVector<f64>, hp: &HyperParams) -> Result<OptimizerState> {
    let mut next = s.clone();
    rmsprop_update(&mut next, g, hp)?;
    Ok(next)
}

pub fn adam_step(s: &OptimizerState, g: &DVector<f64>, hp: &HyperParams) -> Result<OptimizerState> {
    let mut next = s.clone();
    adam_update(&mut next, g, hp)?;
    Ok(next)
}

pub fn sgd_step(s: &OptimizerState, g: &DVector<f64>, hp: &HyperParams) -> Result<OptimizerState> {
    let mut next = s.clone();
    sgd_update(&mut next, g, hp)?;
    Ok(next)
}

/// Dispatches to the step function of `algo`.
pub fn update(algo: Algorithm, s: &mut OptimizerState, g: &DVector<f64>, hp: &HyperParams) -> Result<()> {
    match algo {
        Algorithm::Sgd => sgd_update(s, g, hp),
        Algorithm::Rmsprop => rmsprop_update(s, g, hp),
        Algorithm::Adam => adam_update(s, g, hp),
    }
}

/// SVAG hyperparameters: `η/ℓ`, each decay `1 − (1−β)/ℓ²`, `εℓ`.
pub fn svag_transform_hparams(hp: &HyperParams, ell: f64, algo: Algorithm) -> Result<HyperParams> {
    if !(ell >= 1.0) || !ell.is_finite() {
        return Err(invalid("ell", format!("must be >= 1, got {ell}")));
    }
    let l2 = ell * ell;
    let decay = |b: f64| 1.0 - (1.0 - b) / l2;
    let mut out = *hp;
    out.eta = hp.eta / ell;
    out.epsilon = hp.epsilon * ell;
    match algo {
        Algorithm::Rmsprop => out.beta = decay(hp.beta),
        Algorithm::Adam => {
            out.beta1 = decay(hp.beta1);
            out.beta2 = decay(hp.beta2);
        }
        Algorithm::Sgd => {
            return Err(Error::Unsupported(
                "the SVAG transform is defined for RMSprop and Adam".into(),
            ))
        }
    }
    Ok(out)
}

/// Source of stochastic gradients for the runner.
pub trait GradientSampler {
    fn sample(&mut self, oracle: &GradientOracle, theta: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Fresh oracle draws from an RNG.
pub struct RngSampler<R>(pub R);

impl<R: Rng> GradientSampler for RngSampler<R> {
    fn sample(&mut self, oracle: &GradientOracle, theta: &DVector<f64>) -> Result<DVector<f64>> {
        oracle.sample_gradient(theta, &mut self.0)
    }
}

/// Gaussian draws `∇f + σ Σ^{1/2} (sign · w)` with `w` taken from a normal
/// stream shared with another simulation (common random numbers).
pub struct CoupledSampler<S> {
    pub stream: S,
    pub sign: f64,
    buf: Vec<f64>,
}

impl<S: NormalStream> CoupledSampler<S> {
    pub fn new(stream: S, sign: f64) -> Self {
        Self {
            stream,
            sign,
            buf: Vec::new(),
        }
    }
}

impl<S: NormalStream> GradientSampler for CoupledSampler<S> {
    fn sample(&mut self, oracle: &GradientOracle, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.buf.resize(theta.len(), 0.0);
        self.stream.fill_standard_normal(&mut self.buf);
        if self.sign != 1.0 {
            self.buf.iter_mut().for_each(|w| *w *= self.sign);
        }
        oracle.gaussian_from_normals(theta, &self.buf)
    }
}

/// Description of a discrete run shared by all seeds.
#[derive(Debug, Clone)]
pub struct DiscreteRun<'a> {
    pub oracle: &'a GradientOracle,
    pub algo: Algorithm,
    pub hp: HyperParams,
    pub init: &'a OptimizerState,
    pub steps: u64,
    pub fns: &'a TestFunctionSet,
    /// Step counts relative to `init`, within `[0, steps]`.
    pub checkpoints: &'a [u64],
}

impl DiscreteRun<'_> {
    fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.init.validate(self.algo, &self.hp)?;
        check_dim(self.oracle.problem().dim(), self.init.dim())?;
        if self.checkpoints.iter().any(|&c| c > self.steps) {
            return Err(invalid("checkpoints", format!("must lie in [0, {}]", self.steps)));
        }
        if self.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("checkpoints", "must be strictly increasing"));
        }
        Ok(())
    }

    /// Simulates one path.
    pub fn path<G: GradientSampler>(&self, sampler: &mut G) -> Result<Path> {
        self.validate()?;
        let sigma = self.oracle.sigma_effective();
        let u_scale = if sigma == 0.0 { 1.0 } else { 1.0 / (sigma * sigma) };
        let dt = self.algo.time_per_step(self.hp.eta);
        let mut state = self.init.clone();
        let mut path = Path {
            times: Vec::with_capacity(self.checkpoints.len()),
            indices: Vec::with_capacity(self.checkpoints.len()),
            values: Vec::with_capacity(self.checkpoints.len()),
        };
        let mut u = vec![0.0; state.dim()];
        let mut next = 0;
        let mut record = |state: &OptimizerState, path: &mut Path| -> Result<()> {
            for (ui, vi) in u.iter_mut().zip(state.v.iter()) {
                *ui = vi * u_scale;
            }
            let view = StateView {
                theta: state.theta.as_slice(),
                m: (self.algo == Algorithm::Adam).then(|| state.m.as_slice()),
                u: self.algo.is_adaptive().then_some(u.as_slice()),
            };
            path.values.push(self.fns.evaluate(&view)?);
            path.times.push(state.k as f64 * dt);
            path.indices.push(state.k);
            Ok(())
        };
        for step in 0..=self.steps {
            if next < self.checkpoints.len() && self.checkpoints[next] == step {
                record(&state, &mut path)?;
                next += 1;
            }
            if step == self.steps {
                break;
            }
            let g = sampler.sample(self.oracle, &state.theta)?;
            update(self.algo, &mut state, &g, &self.hp)?;
            if !state.is_finite() {
                return Err(Error::NonFiniteStep { step: state.k });
            }
        }
        Ok(path)
    }

    /// Final state of one path (no recording).
    pub fn final_state<G: GradientSampler>(&self, sampler: &mut G) -> Result<OptimizerState> {
        self.validate()?;
        let mut state = self.init.clone();
        for _ in 0..self.steps {
            let g = sampler.sample(self.oracle, &state.theta)?;
            update(self.algo, &mut state, &g, &self.hp)?;
            if !state.is_finite() {
                return Err(Error::NonFiniteStep { step: state.k });
            }
        }
        Ok(state)
    }
}

/// Runs one path per seed (stream `path_rng(cell_seed, seed)`) in parallel and
/// merges them in seed order.
#[allow(clippy::too_many_arguments)]
pub fn run_discrete(
    oracle: &GradientOracle,
    algo: Algorithm,
    hp: &HyperParams,
    init: &OptimizerState,
    steps: u64,
    fns: &TestFunctionSet,
    checkpoints: &[u64],
    cell_seed: u64,
    seeds: &[u64],
) -> Result<TrajectoryRecord> {
    let run = DiscreteRun {
        oracle,
        algo,
        hp: *hp,
        init,
        steps,
        fns,
        checkpoints,
    };
    run.validate()?;
    let paths = seeds
        .par_iter()
        .map(|&s| run.path(&mut RngSampler(path_rng(cell_seed, s))))
        .collect::<Result<Vec<_>>>()?;
    TrajectoryRecord::from_paths(fns.names(), seeds.to_vec(), paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{CovarianceSpec, Problem};
    use crate::record::TestFunction;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn st(theta: f64, v: f64) -> OptimizerState {
        OptimizerState::new(dvector![theta], dvector![v]).unwrap()
    }

    #[test]
    fn rmsprop_examples() {
        let hp = HyperParams::rmsprop(0.1, 0.5, 0.0);
        let s = rmsprop_step(&st(1.0, 4.0), &dvector![2.0], &hp).unwrap();
        assert!((s.theta[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.v[0], 4.0);
        assert_eq!(s.k, 1);

        let s = rmsprop_step(&st(1.0, 4.0), &dvector![0.0], &hp).unwrap();
        assert_eq!((s.theta[0], s.v[0]), (1.0, 2.0));

        let frozen = HyperParams::rmsprop(0.1, 1.0, 0.0);
        let mut s = st(0.0, 3.0);
        for g in [1.0, -5.0, 2.0] {
            rmsprop_update(&mut s, &dvector![g], &frozen).unwrap();
        }
        assert_eq!(s.v[0], 3.0);

        assert!(matches!(
            rmsprop_step(&st(0.0, 0.0), &dvector![1.0], &hp),
            Err(Error::ZeroDenominator { index: 0 })
        ));
    }

    #[test]
    fn adam_examples() {
        let hp = HyperParams::adam(0.1, 0.9, 0.99, 0.0);
        let s = adam_step(&st(0.0, 1.0), &dvector![2.0], &hp).unwrap();
        assert!((s.m[0] - 0.2).abs() < 1e-15);
        assert!((s.theta[0] + 0.2).abs() < 1e-15);

        let s0 = st(0.7, 1.0);
        assert_eq!(adam_step(&s0, &dvector![0.0], &hp).unwrap().theta, s0.theta);

        let sign = HyperParams::adam(0.1, 0.0, 0.0, 0.0);
        let mut s = st(0.0, 1.0);
        s.k = 3;
        for g in [2.5, -0.3] {
            // v̂ is the previous squared gradient, so only the direction is fixed.
            let next = adam_step(&s, &dvector![g], &sign).unwrap();
            assert_eq!((next.theta[0] - s.theta[0]).signum(), -g.signum());
            s = next;
        }

        let bad = HyperParams::adam(0.1, 1.0, 0.99, 0.0);
        assert!(adam_step(&st(0.0, 1.0), &dvector![1.0], &bad).is_err());
    }

    #[test]
    fn sgd_examples() {
        let hp = HyperParams::sgd(0.5);
        let s = OptimizerState::new(dvector![0.0, 0.0], dvector![0.0, 0.0]).unwrap();
        assert_eq!(
            sgd_step(&s, &dvector![1.0, -1.0], &hp).unwrap().theta,
            dvector![-0.5, 0.5]
        );
        assert_eq!(sgd_step(&s, &dvector![0.0, 0.0], &hp).unwrap().theta, s.theta);
        let g = dvector![0.3, 0.2];
        let two = sgd_step(&sgd_step(&s, &g, &hp).unwrap(), &g, &hp).unwrap();
        let one = sgd_step(&s, &g, &HyperParams::sgd(1.0)).unwrap();
        assert_eq!(two.theta, one.theta);
    }

    #[test]
    fn svag_transform_examples() {
        let hp = HyperParams::rmsprop(1e-3, 0.999, 1e-8);
        assert_eq!(svag_transform_hparams(&hp, 1.0, Algorithm::Rmsprop).unwrap(), hp);
        let t = svag_transform_hparams(&hp, 2.0, Algorithm::Rmsprop).unwrap();
        assert!((t.eta - 5e-4).abs() < 1e-18);
        assert!((t.beta - 0.99975).abs() < 1e-12);
        assert!((t.epsilon - 2e-8).abs() < 1e-20);
        assert!(((1.0 - hp.beta) - (1.0 - t.beta) * 4.0).abs() < 1e-12);
    }

    #[test]
    fn hyperparameter_ranges() {
        assert!(HyperParams::rmsprop(0.1, 1.5, 0.0).validate().is_err());
        assert!(HyperParams::rmsprop(0.0, 0.5, 0.0).validate().is_err());
        assert!(HyperParams::rmsprop(0.1, 0.5, -1.0).validate().is_err());
        let hp = HyperParams::rmsprop(0.1, 0.5, 0.0);
        assert!(st(0.0, 0.0).validate(Algorithm::Rmsprop, &hp).is_err());
    }

    #[test]
    fn v_closed_form_matches_iteration() {
        let hp = HyperParams::rmsprop(0.01, 0.9, 1e-8);
        let gs = [0.3, -1.2, 0.8, 2.0, -0.1, 0.5];
        let mut s = st(0.0, 0.7);
        for g in gs {
            rmsprop_update(&mut s, &dvector![g], &hp).unwrap();
        }
        let k = gs.len();
        let closed = hp.beta.powi(k as i32) * 0.7
            + (1.0 - hp.beta)
                * gs.iter()
                    .enumerate()
                    .map(|(j, g)| hp.beta.powi((k - 1 - j) as i32) * g * g)
                    .sum::<f64>();
        assert!((s.v[0] - closed).abs() < 1e-12);
    }

    #[test]
    fn adam_with_zero_beta1_reduces_to_rmsprop() {
        // β₁ = 0 and k large: both bias corrections are 1 to machine precision.
        let adam = HyperParams::adam(0.05, 0.0, 0.5, 1e-3);
        let rms = HyperParams::rmsprop(0.05, 0.5, 1e-3);
        let mut a = st(1.0, 0.4);
        a.k = 10_000;
        let mut r = a.clone();
        for g in [0.3, -0.7, 1.1, 0.2] {
            adam_update(&mut a, &dvector![g], &adam).unwrap();
            rmsprop_update(&mut r, &dvector![g], &rms).unwrap();
        }
        assert!((a.theta[0] - r.theta[0]).abs() < 1e-12);
        assert!((a.v[0] - r.v[0]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn svag_transform_composes(a in 1.0f64..8.0, b in 1.0f64..8.0, beta in 0.0f64..1.0) {
            let hp = HyperParams::adam(0.1, beta, beta, 1e-6);
            let two = svag_transform_hparams(&svag_transform_hparams(&hp, a, Algorithm::Adam).unwrap(), b, Algorithm::Adam).unwrap();
            let one = svag_transform_hparams(&hp, a * b, Algorithm::Adam).unwrap();
            prop_assert!((two.eta - one.eta).abs() <= 1e-12);
            prop_assert!((two.beta1 - one.beta1).abs() <= 1e-12);
            prop_assert!((two.beta2 - one.beta2).abs() <= 1e-12);
        }

        #[test]
        fn rmsprop_keeps_v_nonnegative(v in 0.0f64..10.0, g in -10.0f64..10.0, beta in 0.0f64..=1.0) {
            let hp = HyperParams::rmsprop(0.1, beta, 1e-8);
            let s = rmsprop_step(&st(0.0, v), &dvector![g], &hp).unwrap();
            prop_assert!(s.v[0] >= 0.0);
        }
    }

    fn toy_run(sigma: f64) -> (GradientOracle, TestFunctionSet) {
        let p = Arc::new(Problem::quadratic(dmatrix![1.0, 0.0; 0.0, 2.0], dvector![0.0, 0.0]).unwrap());
        let cov = CovarianceSpec::isotropic(1.0).unwrap();
        let o = GradientOracle::gaussian(p.clone(), cov.clone(), sigma).unwrap();
        let fns = TestFunctionSet::new(p, cov, vec![TestFunction::Coordinate(0), TestFunction::U(1)]).unwrap();
        (o, fns)
    }

    #[test]
    fn runner_contracts() {
        let (o, fns) = toy_run(2.0);
        let init = OptimizerState::new(dvector![1.0, -1.0], dvector![4.0, 4.0]).unwrap();
        let hp = HyperParams::rmsprop(0.1, 0.9, 0.0);
        let r = run_discrete(&o, Algorithm::Rmsprop, &hp, &init, 0, &fns, &[0], 1, &[0, 1]).unwrap();
        assert_eq!(r.checkpoints.len(), 1);
        assert_eq!(r.samples(1, 0), &[1.0, 1.0]);

        let a = run_discrete(
            &o,
            Algorithm::Rmsprop,
            &hp,
            &init,
            20,
            &fns,
            &[0, 10, 20],
            7,
            &[0, 1, 2],
        )
        .unwrap();
        let b = run_discrete(
            &o,
            Algorithm::Rmsprop,
            &hp,
            &init,
            20,
            &fns,
            &[0, 10, 20],
            7,
            &[0, 1, 2],
        )
        .unwrap();
        assert_eq!(a, b);
        assert!((a.checkpoints[2].t - 20.0 * 0.01).abs() < 1e-15);

        let (quiet, fns) = toy_run(0.0);
        let d = run_discrete(&quiet, Algorithm::Rmsprop, &hp, &init, 20, &fns, &[20], 7, &[0, 1, 2]).unwrap();
        let s = d.samples(0, 0);
        assert!(s.iter().all(|x| *x == s[0]));

        assert!(run_discrete(&o, Algorithm::Rmsprop, &hp, &init, 5, &fns, &[6], 7, &[0]).is_err());
    }

    #[test]
    fn blow_up_is_reported_with_step() {
        let (o, fns) = toy_run(0.0);
        let fns = TestFunctionSet::new(fns.problem().clone(), o.covariance_spec(), vec![TestFunction::Loss]).unwrap();
        let init = OptimizerState::new(dvector![1.0, 1.0], dvector![0.0, 0.0]).unwrap();
        let r = run_discrete(
            &o,
            Algorithm::Sgd,
            &HyperParams::sgd(1e200),
            &init,
            5,
            &fns,
            &[0],
            0,
            &[0],
        );
        assert!(matches!(r, Err(Error::NonFiniteStep { .. })));
    }
}

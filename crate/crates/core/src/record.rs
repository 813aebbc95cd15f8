//! Test functions over recorded states and the per-checkpoint sample records
//! produced by discrete and continuous simulations.

use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::problems::{CovarianceSpec, Problem};
use crate::stats;

/// State as seen by test functions. Adaptive states carry `u = v/σ²`.
#[derive(Debug, Clone, Copy)]
pub struct StateView<'a> {
    pub theta: &'a [f64],
    pub m: Option<&'a [f64]>,
    pub u: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TestFunction {
    Coordinate(usize),
    NormSquared,
    Loss,
    GradNorm,
    TraceSigma,
    U(usize),
    M(usize),
    Constant(f64),
}

impl TestFunction {
    pub fn name(&self) -> String {
        match self {
            Self::Coordinate(i) => format!("theta[{i}]"),
            Self::NormSquared => "norm_sq".into(),
            Self::Loss => "loss".into(),
            Self::GradNorm => "grad_norm".into(),
            Self::TraceSigma => "trace_sigma".into(),
            Self::U(i) => format!("u[{i}]"),
            Self::M(i) => format!("m[{i}]"),
            Self::Constant(c) => format!("const({c})"),
        }
    }

    /// Inverse of [`TestFunction::name`].
    pub fn parse(s: &str) -> Result<Self> {
        let indexed = |prefix: &str| -> Option<usize> { s.strip_prefix(prefix)?.strip_suffix(']')?.parse().ok() };
        if let Some(i) = indexed("theta[") {
            return Ok(Self::Coordinate(i));
        }
        if let Some(i) = indexed("u[") {
            return Ok(Self::U(i));
        }
        if let Some(i) = indexed("m[") {
            return Ok(Self::M(i));
        }
        if let Some(c) = s
            .strip_prefix("const(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|c| c.parse().ok())
        {
            return Ok(Self::Constant(c));
        }
        match s {
            "norm_sq" => Ok(Self::NormSquared),
            "loss" => Ok(Self::Loss),
            "grad_norm" => Ok(Self::GradNorm),
            "trace_sigma" => Ok(Self::TraceSigma),
            _ => Err(invalid("test function", format!("unknown name `{s}`"))),
        }
    }
}

/// An ordered list of test functions bound to a problem and its noise covariance.
#[derive(Debug, Clone)]
pub struct TestFunctionSet {
    problem: Arc<Problem>,
    cov: CovarianceSpec,
    fns: Vec<TestFunction>,
}

impl TestFunctionSet {
    pub fn new(problem: Arc<Problem>, cov: CovarianceSpec, fns: Vec<TestFunction>) -> Result<Self> {
        let d = problem.dim();
        for f in &fns {
            if let TestFunction::Coordinate(i) | TestFunction::U(i) | TestFunction::M(i) = f {
                if *i >= d {
                    return Err(invalid(
                        "test function",
                        format!("{} out of range for d = {d}", f.name()),
                    ));
                }
            }
        }
        Ok(Self { problem, cov, fns })
    }

    /// Every θ coordinate, ‖θ‖², f, ‖∇f‖, tr Σ, plus `u` and `m` coordinates
    /// when requested.
    pub fn builtins(problem: Arc<Problem>, cov: CovarianceSpec, with_u: bool, with_m: bool) -> Self {
        let d = problem.dim();
        let mut fns: Vec<TestFunction> = (0..d).map(TestFunction::Coordinate).collect();
        fns.extend([
            TestFunction::NormSquared,
            TestFunction::Loss,
            TestFunction::GradNorm,
            TestFunction::TraceSigma,
        ]);
        if with_u {
            fns.extend((0..d).map(TestFunction::U));
        }
        if with_m {
            fns.extend((0..d).map(TestFunction::M));
        }
        Self { problem, cov, fns }
    }

    pub fn functions(&self) -> &[TestFunction] {
        &self.fns
    }

    pub fn names(&self) -> Vec<String> {
        self.fns.iter().map(TestFunction::name).collect()
    }

    pub fn len(&self) -> usize {
        self.fns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fns.is_empty()
    }

    pub fn problem(&self) -> &Arc<Problem> {
        &self.problem
    }

    pub fn evaluate(&self, s: &StateView<'_>) -> Result<Vec<f64>> {
        let theta = DVector::from_column_slice(s.theta);
        let mut out = Vec::with_capacity(self.fns.len());
        for f in &self.fns {
            let value = match *f {
                TestFunction::Coordinate(i) => s.theta[i],
                TestFunction::NormSquared => theta.norm_squared(),
                TestFunction::Loss => self.problem.loss(&theta)?,
                TestFunction::GradNorm => self.problem.full_gradient(&theta)?.norm(),
                TestFunction::TraceSigma => self.cov.trace(&self.problem, &theta)?,
                TestFunction::U(i) => s.u.ok_or_else(|| missing("u"))?[i],
                TestFunction::M(i) => s.m.ok_or_else(|| missing("m"))?[i],
                TestFunction::Constant(c) => c,
            };
            out.push(value);
        }
        Ok(out)
    }
}

fn missing(block: &str) -> Error {
    Error::Unsupported(format!(
        "test function needs the `{block}` block, which this state lacks"
    ))
}

/// Test-function values along one simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub times: Vec<f64>,
    /// Discrete step index or integrator grid index.
    pub indices: Vec<u64>,
    /// `values[checkpoint][function]`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub t: f64,
    pub index: u64,
    /// `samples[function][seed]`.
    pub samples: Vec<Vec<f64>>,
}

/// Per-checkpoint test-function samples over a set of seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub function_names: Vec<String>,
    pub checkpoints: Vec<Checkpoint>,
    pub seeds: Vec<u64>,
    pub fingerprint: String,
}

impl TrajectoryRecord {
    /// Merges single-path results, ordered as `seeds`.
    pub fn from_paths(function_names: Vec<String>, seeds: Vec<u64>, paths: Vec<Path>) -> Result<Self> {
        let first = paths
            .first()
            .ok_or_else(|| invalid("seeds", "at least one path is required"))?;
        if seeds.len() != paths.len() {
            return Err(invalid("seeds", "one path per seed is required"));
        }
        if first.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::GridMismatch("checkpoint times must strictly increase".into()));
        }
        for p in &paths {
            if p.times != first.times || p.indices != first.indices {
                return Err(Error::GridMismatch("paths disagree on checkpoint times".into()));
            }
        }
        let nf = function_names.len();
        let checkpoints = first
            .times
            .iter()
            .zip(&first.indices)
            .enumerate()
            .map(|(c, (&t, &index))| Checkpoint {
                t,
                index,
                samples: (0..nf)
                    .map(|f| paths.iter().map(|p| p.values[c][f]).collect())
                    .collect(),
            })
            .collect();
        Ok(Self {
            function_names,
            checkpoints,
            seeds,
            fingerprint: String::new(),
        })
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }

    pub fn times(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.t).collect()
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.function_names.iter().position(|n| n == name)
    }

    pub fn samples(&self, function: usize, checkpoint: usize) -> &[f64] {
        &self.checkpoints[checkpoint].samples[function]
    }

    /// `(mean, SE)` of a function at a checkpoint.
    pub fn mean_se(&self, function: usize, checkpoint: usize) -> (f64, f64) {
        stats::mean_se(self.samples(function, checkpoint))
    }

    pub fn n_seeds(&self) -> usize {
        self.seeds.len()
    }

    /// Keeps only the listed seed positions (used for bootstrap resampling).
    pub fn select_seeds(&self, positions: &[usize]) -> Self {
        Self {
            function_names: self.function_names.clone(),
            checkpoints: self
                .checkpoints
                .iter()
                .map(|c| Checkpoint {
                    t: c.t,
                    index: c.index,
                    samples: c
                        .samples
                        .iter()
                        .map(|s| positions.iter().map(|&p| s[p]).collect())
                        .collect(),
                })
                .collect(),
            seeds: positions.iter().map(|&p| self.seeds[p]).collect(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn set() -> TestFunctionSet {
        let p = Arc::new(Problem::quadratic(dmatrix![1.0, 0.0; 0.0, 4.0], dvector![0.0, 0.0]).unwrap());
        TestFunctionSet::builtins(p, CovarianceSpec::isotropic(2.0).unwrap(), true, true)
    }

    #[test]
    fn names_round_trip() {
        for f in set().functions() {
            assert_eq!(TestFunction::parse(&f.name()).unwrap(), *f);
        }
        assert_eq!(TestFunction::parse("const(1)").unwrap(), TestFunction::Constant(1.0));
        assert!(TestFunction::parse("bogus").is_err());
    }

    #[test]
    fn builtins_evaluate() {
        let s = set();
        let v = s
            .evaluate(&StateView {
                theta: &[1.0, 1.0],
                m: Some(&[0.5, -0.5]),
                u: Some(&[3.0, 4.0]),
            })
            .unwrap();
        assert_eq!(v, vec![1.0, 1.0, 2.0, 2.5, 17f64.sqrt(), 4.0, 3.0, 4.0, 0.5, -0.5]);
        let err = s.evaluate(&StateView {
            theta: &[1.0, 1.0],
            m: None,
            u: None,
        });
        assert!(err.is_err());
    }

    #[test]
    fn out_of_range_coordinates_are_rejected() {
        let s = set();
        assert!(TestFunctionSet::new(
            s.problem().clone(),
            CovarianceSpec::isotropic(1.0).unwrap(),
            vec![TestFunction::Coordinate(2)]
        )
        .is_err());
    }

    #[test]
    fn merge_transposes_paths() {
        let p = |x: f64| Path {
            times: vec![0.0, 1.0],
            indices: vec![0, 10],
            values: vec![vec![x], vec![2.0 * x]],
        };
        let r = TrajectoryRecord::from_paths(vec!["a".into()], vec![0, 1], vec![p(1.0), p(3.0)]).unwrap();
        assert_eq!(r.samples(0, 1), &[2.0, 6.0]);
        assert_eq!(r.mean_se(0, 0).0, 2.0);
        let mut bad = p(1.0);
        bad.times[1] = 2.0;
        assert!(TrajectoryRecord::from_paths(vec!["a".into()], vec![0, 1], vec![p(1.0), bad]).is_err());
    }
}

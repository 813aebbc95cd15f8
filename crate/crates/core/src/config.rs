//! Experiment files: TOML text validated in full before anything runs.
//!
//! Every problem found is reported, including unknown keys and values that
//! violate an operation's preconditions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{ConfigErrors, Error, Result};
use crate::harness::{
    NoiseModel, OrderSweepConfig, ScalingExperiment, SvagSweepConfig, DEFAULT_BOOTSTRAP, DEFAULT_SEEDS,
    DEFAULT_SUBSTEPS,
};
use crate::ngos::{GradientOracle, NoiseKind};
use crate::optimizers::{Algorithm, HyperParams};
use crate::problems::{CovarianceSpec, Problem};
use crate::record::{TestFunction, TestFunctionSet};
use crate::scaling::{ScaleFlags, ScalingPlan, ScalingRule};
use crate::sde::SdeConstants;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Run,
    Moments,
    OrderSweep,
    SvagSweep,
    ValidateScaling,
    WarmupCheck,
    NoiseDiag,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::Run,
        Self::Moments,
        Self::OrderSweep,
        Self::SvagSweep,
        Self::ValidateScaling,
        Self::WarmupCheck,
        Self::NoiseDiag,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Run => "run",
            Self::Moments => "moments",
            Self::OrderSweep => "order-sweep",
            Self::SvagSweep => "svag-sweep",
            Self::ValidateScaling => "validate-scaling",
            Self::WarmupCheck => "warmup-check",
            Self::NoiseDiag => "noise-diag",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "noise-diagnostics" {
            return Some(Self::NoiseDiag);
        }
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ensemble of discrete runs, optionally paired with the matching SDE.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub oracle: GradientOracle,
    pub algo: Algorithm,
    pub hp: HyperParams,
    pub theta0: DVector<f64>,
    pub u0: DVector<f64>,
    pub steps: u64,
    pub checkpoints: Vec<u64>,
    pub fns: Vec<TestFunction>,
    pub seeds: usize,
    pub sde: Option<SdeRunSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeRunSpec {
    pub substeps: u32,
    pub coupled: bool,
}

/// Analytic one-step moments against Monte Carlo at each η.
#[derive(Debug, Clone)]
pub struct MomentsSpec {
    pub problem: Arc<Problem>,
    pub cov: CovarianceSpec,
    pub algo: Algorithm,
    pub consts: SdeConstants,
    pub etas: Vec<f64>,
    pub theta: DVector<f64>,
    pub m: DVector<f64>,
    pub u: DVector<f64>,
    pub step: u64,
    pub samples: usize,
    /// `O(η⁴)` tolerance; calibrated from the smallest η when absent.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct WarmupSpec {
    pub g_bar: DVector<f64>,
    pub sigma: f64,
    pub eta: f64,
    pub k: u64,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct NoiseDiagSpec {
    pub oracle: GradientOracle,
    pub theta: DVector<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub enum ExperimentSpec {
    Run(RunSpec),
    Moments(MomentsSpec),
    OrderSweep(OrderSweepConfig),
    SvagSweep(SvagSweepConfig),
    ValidateScaling(ScalingExperiment),
    WarmupCheck(WarmupSpec),
    NoiseDiag(NoiseDiagSpec),
}

/// A fully validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// SHA-256 of the config text, embedded in every output file.
    pub fingerprint: String,
    pub spec: ExperimentSpec,
}

pub fn fingerprint(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Reads and validates a config file.
pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Parses and validates config text, collecting every error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| {
        Error::Config(ConfigErrors(vec![format!("malformed config: {}", e.message())]))
    })?;
    let mut p = Parser::default();
    let spec = p.experiment(&root);
    match spec {
        Some((kind, spec)) if p.errors.is_empty() => Ok(ExperimentConfig {
            kind,
            fingerprint: fingerprint(text),
            spec,
        }),
        _ => {
            if p.errors.is_empty() {
                p.errors.push("configuration is incomplete".into());
            }
            Err(Error::Config(ConfigErrors(p.errors)))
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "kind",
    "seeds",
    "problem",
    "noise",
    "optimizer",
    "sde",
    "sweep",
    "scaling",
    "warmup",
    "moments",
    "diagnostics",
    "functions",
];

#[derive(Default)]
struct Parser {
    errors: Vec<String>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Parser {
    fn err(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    fn keys(&mut self, t: &Table, path: &str, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.err(format!("unknown key `{}`", join(path, k)));
            }
        }
    }

    fn table<'a>(&mut self, t: &'a Table, key: &str, required: bool) -> Option<&'a Table> {
        match t.get(key) {
            Some(Value::Table(s)) => Some(s),
            Some(_) => {
                self.err(format!("`{key}` must be a table"));
                None
            }
            None => {
                if required {
                    self.err(format!("missing table `[{key}]`"));
                }
                None
            }
        }
    }

    fn num(&mut self, v: &Value, name: &str) -> Option<f64> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.err(format!("`{name}` must be a number"));
                None
            }
        }
    }

    fn f64(&mut self, t: &Table, path: &str, key: &str) -> Option<f64> {
        let name = join(path, key);
        t.get(key).and_then(|v| self.num(v, &name))
    }

    fn req_f64(&mut self, t: &Table, path: &str, key: &str) -> Option<f64> {
        if !t.contains_key(key) {
            self.err(format!("missing key `{}`", join(path, key)));
        }
        self.f64(t, path, key)
    }

    fn int(&mut self, t: &Table, path: &str, key: &str) -> Option<u64> {
        let name = join(path, key);
        match t.get(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            _ => {
                self.err(format!("`{name}` must be a non-negative integer"));
                None
            }
        }
    }

    fn req_int(&mut self, t: &Table, path: &str, key: &str) -> Option<u64> {
        if !t.contains_key(key) {
            self.err(format!("missing key `{}`", join(path, key)));
        }
        self.int(t, path, key)
    }

    fn bool(&mut self, t: &Table, path: &str, key: &str) -> Option<bool> {
        match t.get(key)? {
            Value::Boolean(b) => Some(*b),
            _ => {
                self.err(format!("`{}` must be true or false", join(path, key)));
                None
            }
        }
    }

    fn str<'a>(&mut self, t: &'a Table, path: &str, key: &str) -> Option<&'a str> {
        match t.get(key)? {
            Value::String(s) => Some(s),
            _ => {
                self.err(format!("`{}` must be a string", join(path, key)));
                None
            }
        }
    }

    fn req_str<'a>(&mut self, t: &'a Table, path: &str, key: &str) -> Option<&'a str> {
        if !t.contains_key(key) {
            self.err(format!("missing key `{}`", join(path, key)));
        }
        self.str(t, path, key)
    }

    fn vec(&mut self, t: &Table, path: &str, key: &str) -> Option<Vec<f64>> {
        let name = join(path, key);
        match t.get(key)? {
            Value::Array(a) => {
                let out: Vec<f64> = a.iter().filter_map(|v| self.num(v, &name)).collect();
                (out.len() == a.len()).then_some(out)
            }
            _ => {
                self.err(format!("`{name}` must be an array of numbers"));
                None
            }
        }
    }

    fn req_vec(&mut self, t: &Table, path: &str, key: &str) -> Option<Vec<f64>> {
        if !t.contains_key(key) {
            self.err(format!("missing key `{}`", join(path, key)));
        }
        self.vec(t, path, key)
    }

    fn dvec(&mut self, t: &Table, path: &str, key: &str, dim: usize) -> Option<DVector<f64>> {
        let v = self.vec(t, path, key)?;
        if v.len() != dim {
            self.err(format!("`{}` has length {}, expected {dim}", join(path, key), v.len()));
            return None;
        }
        Some(DVector::from_vec(v))
    }

    fn ints(&mut self, t: &Table, path: &str, key: &str) -> Option<Vec<u64>> {
        let name = join(path, key);
        match t.get(key)? {
            Value::Array(a) => {
                let out: Vec<u64> = a
                    .iter()
                    .filter_map(|v| match v {
                        Value::Integer(i) if *i >= 0 => Some(*i as u64),
                        _ => None,
                    })
                    .collect();
                if out.len() != a.len() {
                    self.err(format!("`{name}` must contain non-negative integers"));
                    return None;
                }
                Some(out)
            }
            _ => {
                self.err(format!("`{name}` must be an array of integers"));
                None
            }
        }
    }

    /// Row-major nested array.
    fn matrix(&mut self, t: &Table, path: &str, key: &str) -> Option<DMatrix<f64>> {
        let name = join(path, key);
        let rows = match t.get(key)? {
            Value::Array(rows) => rows,
            _ => {
                self.err(format!("`{name}` must be an array of rows"));
                return None;
            }
        };
        let mut data = Vec::new();
        let mut ncols = None;
        for r in rows {
            let Value::Array(r) = r else {
                self.err(format!("`{name}` must be an array of rows"));
                return None;
            };
            if *ncols.get_or_insert(r.len()) != r.len() {
                self.err(format!("`{name}` rows have different lengths"));
                return None;
            }
            for v in r {
                data.push(self.num(v, &name)?);
            }
        }
        let ncols = ncols.unwrap_or(0);
        if rows.is_empty() || ncols == 0 {
            self.err(format!("`{name}` must be non-empty"));
            return None;
        }
        Some(DMatrix::from_row_slice(rows.len(), ncols, &data))
    }

    fn req_positive(&mut self, t: &Table, path: &str, key: &str) -> Option<f64> {
        let v = self.req_f64(t, path, key);
        self.positive(v, &join(path, key))
    }

    fn positive(&mut self, v: Option<f64>, name: &str) -> Option<f64> {
        match v {
            Some(x) if x > 0.0 && x.is_finite() => Some(x),
            Some(x) => {
                self.err(format!("`{name}` must be > 0, got {x}"));
                None
            }
            None => None,
        }
    }

    fn wrap<T>(&mut self, section: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(Error::InvalidParameter { reason, .. }) => {
                self.err(format!("{section}: {reason}"));
                None
            }
            Err(e) => {
                self.err(format!("{section}: {e}"));
                None
            }
        }
    }

    fn experiment(&mut self, root: &Table) -> Option<(ExperimentKind, ExperimentSpec)> {
        self.keys(root, "", TOP_KEYS);
        let kind_s = self.req_str(root, "", "kind")?;
        let Some(kind) = ExperimentKind::parse(kind_s) else {
            let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
            self.err(format!(
                "unknown kind `{kind_s}` (expected one of {})",
                names.join(", ")
            ));
            return None;
        };
        let seeds = match self.int(root, "", "seeds") {
            Some(0 | 1) => {
                self.err("`seeds` must be at least 2");
                None
            }
            Some(s) => Some(s as usize),
            None => Some(DEFAULT_SEEDS),
        };
        let spec = match kind {
            ExperimentKind::Run => self.run(root, seeds).map(ExperimentSpec::Run),
            ExperimentKind::Moments => self.moments(root).map(ExperimentSpec::Moments),
            ExperimentKind::OrderSweep => self.order_sweep(root, seeds).map(ExperimentSpec::OrderSweep),
            ExperimentKind::SvagSweep => self.svag_sweep(root, seeds).map(ExperimentSpec::SvagSweep),
            ExperimentKind::ValidateScaling => self.scaling(root, seeds).map(ExperimentSpec::ValidateScaling),
            ExperimentKind::WarmupCheck => self.warmup(root, seeds).map(ExperimentSpec::WarmupCheck),
            ExperimentKind::NoiseDiag => self.noise_diag(root).map(ExperimentSpec::NoiseDiag),
        };
        spec.map(|s| (kind, s))
    }

    fn problem(&mut self, root: &Table) -> Option<Arc<Problem>> {
        let t = self.table(root, "problem", true)?;
        let ty = self.req_str(t, "problem", "type")?;
        let out = match ty {
            "linear" => {
                self.keys(t, "problem", &["type", "g_bar"]);
                let g = self.req_vec(t, "problem", "g_bar")?;
                Problem::linear(DVector::from_vec(g))
            }
            "quadratic" => {
                self.keys(t, "problem", &["type", "a", "b"]);
                if !t.contains_key("a") {
                    self.err("missing key `problem.a`");
                }
                let a = self.matrix(t, "problem", "a")?;
                let b = match self.vec(t, "problem", "b") {
                    Some(b) => DVector::from_vec(b),
                    None => DVector::zeros(a.nrows()),
                };
                Problem::quadratic(a, b)
            }
            "least_squares" => {
                self.keys(
                    t,
                    "problem",
                    &["type", "x", "y", "n", "d", "residual_scale", "data_seed"],
                );
                if t.contains_key("x") {
                    let x = self.matrix(t, "problem", "x")?;
                    let y = self.req_vec(t, "problem", "y")?;
                    Problem::least_squares(x, DVector::from_vec(y))
                } else {
                    let n = self.req_int(t, "problem", "n");
                    let d = self.req_int(t, "problem", "d");
                    let scale = self.f64(t, "problem", "residual_scale").unwrap_or(1.0);
                    let seed = self.int(t, "problem", "data_seed").unwrap_or(0);
                    let (x, y) = synthetic_least_squares(n? as usize, d? as usize, scale, seed);
                    Problem::least_squares(x, y)
                }
            }
            other => {
                self.err(format!(
                    "unknown problem type `{other}` (linear, quadratic, least_squares)"
                ));
                return None;
            }
        };
        self.wrap("problem", out).map(Arc::new)
    }

    fn covariance(&mut self, t: &Table, problem: &Problem) -> Option<CovarianceSpec> {
        let spec = match self.str(t, "noise", "covariance").unwrap_or("isotropic") {
            "isotropic" => {
                let c = self.f64(t, "noise", "scale").unwrap_or(1.0);
                self.wrap("noise", CovarianceSpec::isotropic(c))
            }
            "constant" => {
                if !t.contains_key("matrix") {
                    self.err("missing key `noise.matrix`");
                }
                let m = self.matrix(t, "noise", "matrix")?;
                self.wrap("noise", CovarianceSpec::constant(m))
            }
            "empirical" => Some(CovarianceSpec::empirical()),
            other => {
                self.err(format!("unknown covariance `{other}` (isotropic, constant, empirical)"));
                None
            }
        }?;
        self.wrap("noise", spec.validate_for(problem)).map(|_| spec)
    }

    /// The `[noise]` table as a plain oracle.
    fn oracle(&mut self, root: &Table, problem: &Arc<Problem>) -> Option<GradientOracle> {
        let t = self.table(root, "noise", true)?;
        self.keys(
            t,
            "noise",
            &[
                "type",
                "covariance",
                "scale",
                "matrix",
                "sigma",
                "p",
                "batch_size",
                "with_replacement",
                "svag_ell",
            ],
        );
        let ty = self.str(t, "noise", "type").unwrap_or("gaussian");
        let kind = match ty {
            "gaussian" | "bernoulli" => {
                let cov = self.covariance(t, problem);
                let sigma = self.req_f64(t, "noise", "sigma");
                if ty == "gaussian" {
                    NoiseKind::Gaussian {
                        cov: cov?,
                        sigma: sigma?,
                    }
                } else {
                    let p = self.req_f64(t, "noise", "p");
                    NoiseKind::CenteredBernoulli {
                        cov: cov?,
                        p: p?,
                        sigma: sigma?,
                    }
                }
            }
            "minibatch" => {
                let b = self.req_int(t, "noise", "batch_size")?;
                NoiseKind::Minibatch {
                    batch_size: b as usize,
                    with_replacement: self.bool(t, "noise", "with_replacement").unwrap_or(true),
                }
            }
            other => {
                self.err(format!("unknown noise type `{other}` (gaussian, bernoulli, minibatch)"));
                return None;
            }
        };
        let kind = match self.f64(t, "noise", "svag_ell") {
            Some(ell) => NoiseKind::SvagWrapped {
                inner: Box::new(kind),
                ell,
            },
            None => kind,
        };
        self.wrap("noise", GradientOracle::new(problem.clone(), kind))
    }

    fn algorithm(&mut self, t: &Table) -> Option<Algorithm> {
        let s = self.req_str(t, "optimizer", "algorithm")?;
        self.wrap("optimizer", Algorithm::parse(s))
    }

    fn hyperparams(&mut self, t: &Table, algo: Algorithm) -> Option<HyperParams> {
        let eta = self.req_positive(t, "optimizer", "eta");
        let hp = match algo {
            Algorithm::Sgd => HyperParams::sgd(eta?),
            Algorithm::Rmsprop => {
                let beta = self.req_f64(t, "optimizer", "beta");
                let eps = self.f64(t, "optimizer", "epsilon").unwrap_or(0.0);
                HyperParams::rmsprop(eta?, beta?, eps)
            }
            Algorithm::Adam => {
                let b1 = self.req_f64(t, "optimizer", "beta1");
                let b2 = self.req_f64(t, "optimizer", "beta2");
                let eps = self.f64(t, "optimizer", "epsilon").unwrap_or(0.0);
                HyperParams::adam(eta?, b1?, b2?, eps)
            }
        };
        self.wrap("optimizer", hp.validate()).map(|_| hp)
    }

    /// `theta0` as an array, or `theta0_offset` added to the minimiser.
    fn theta0(&mut self, t: &Table, path: &str, problem: &Problem) -> Option<DVector<f64>> {
        let d = problem.dim();
        if let Some(off) = self.f64(t, path, "theta0_offset") {
            if t.contains_key("theta0") {
                self.err(format!(
                    "`{path}.theta0` and `{path}.theta0_offset` are mutually exclusive"
                ));
                return None;
            }
            return match problem.minimizer() {
                Some(m) => Some(m.add_scalar(off)),
                None => {
                    self.err(format!(
                        "`{path}.theta0_offset` needs a problem with a unique minimiser"
                    ));
                    None
                }
            };
        }
        if !t.contains_key("theta0") {
            self.err(format!("missing key `{path}.theta0`"));
            return None;
        }
        self.dvec(t, path, "theta0", d)
    }

    /// `u0` as an array, the string `"sigma-diag"` for `diag Σ(θ₀)`, or 1.
    fn u0(
        &mut self,
        t: &Table,
        path: &str,
        problem: &Problem,
        cov: &CovarianceSpec,
        theta0: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        let d = problem.dim();
        match t.get("u0") {
            None => Some(DVector::from_element(d, 1.0)),
            Some(Value::String(s)) if s == "sigma-diag" => self.wrap(path, cov.diagonal(problem, theta0)),
            Some(Value::String(s)) => {
                self.err(format!("`{path}.u0` must be an array or \"sigma-diag\", got \"{s}\""));
                None
            }
            Some(_) => {
                let u = self.dvec(t, path, "u0", d)?;
                if u.iter().any(|&x| !(x > 0.0)) {
                    self.err(format!("`{path}.u0` entries must be > 0"));
                    return None;
                }
                Some(u)
            }
        }
    }

    fn functions(
        &mut self,
        root: &Table,
        problem: &Arc<Problem>,
        cov: &CovarianceSpec,
        algo: Option<Algorithm>,
    ) -> Option<Vec<TestFunction>> {
        let adaptive = algo.is_some_and(|a| a.is_adaptive());
        let adam = algo == Some(Algorithm::Adam);
        let Some(v) = root.get("functions") else {
            return Some(
                TestFunctionSet::builtins(problem.clone(), cov.clone(), adaptive, adam)
                    .functions()
                    .to_vec(),
            );
        };
        let Value::Array(items) = v else {
            self.err("`functions` must be an array of names");
            return None;
        };
        let mut out = Vec::new();
        for it in items {
            let Value::String(name) = it else {
                self.err("`functions` must be an array of names");
                return None;
            };
            match TestFunction::parse(name) {
                Ok(f) => out.push(f),
                Err(_) => self.err(format!("unknown test function `{name}`")),
            }
        }
        if out.is_empty() {
            self.err("`functions` must not be empty");
            return None;
        }
        let set = self.wrap(
            "functions",
            TestFunctionSet::new(problem.clone(), cov.clone(), out.clone()),
        );
        for f in &out {
            let bad = match f {
                TestFunction::U(_) => !adaptive,
                TestFunction::M(_) => !adam,
                _ => false,
            };
            if bad {
                self.err(format!(
                    "test function `{}` needs a state block the algorithm lacks",
                    f.name()
                ));
            }
        }
        set.map(|_| out)
    }

    fn checkpoints(&mut self, t: &Table, path: &str, steps: u64) -> Option<Vec<u64>> {
        if let Some(list) = self.ints(t, path, "checkpoints") {
            if list.windows(2).any(|w| w[1] <= w[0]) || list.iter().any(|&k| k > steps) {
                self.err(format!(
                    "`{path}.checkpoints` must increase strictly and lie in [0, {steps}]"
                ));
                return None;
            }
            return Some(list);
        }
        let every = self.int(t, path, "checkpoint_every").unwrap_or(steps.max(1));
        if every == 0 {
            self.err(format!("`{path}.checkpoint_every` must be ≥ 1"));
            return None;
        }
        let mut ks: Vec<u64> = (0..=steps).step_by(every as usize).collect();
        if *ks.last().unwrap() != steps {
            ks.push(steps);
        }
        Some(ks)
    }

    fn run(&mut self, root: &Table, seeds: Option<usize>) -> Option<RunSpec> {
        let problem = self.problem(root);
        let opt = self.table(root, "optimizer", true);
        let sde_t = self.table(root, "sde", false);
        let problem = problem?;
        let opt = opt?;
        self.keys(
            opt,
            "optimizer",
            &[
                "algorithm",
                "eta",
                "beta",
                "beta1",
                "beta2",
                "epsilon",
                "theta0",
                "theta0_offset",
                "u0",
                "steps",
                "checkpoints",
                "checkpoint_every",
            ],
        );
        let oracle = self.oracle(root, &problem);
        let algo = self.algorithm(opt)?;
        let hp = self.hyperparams(opt, algo);
        let theta0 = self.theta0(opt, "optimizer", &problem);
        let steps = self.req_int(opt, "optimizer", "steps");
        let oracle = oracle?;
        let cov = oracle.covariance_spec();
        let u0 = self.u0(opt, "optimizer", &problem, &cov, theta0.as_ref()?)?;
        let checkpoints = self.checkpoints(opt, "optimizer", steps?);
        let fns = self.functions(root, &problem, &cov, Some(algo));
        let sde = match sde_t {
            Some(s) => {
                self.keys(s, "sde", &["enabled", "substeps", "coupled"]);
                let enabled = self.bool(s, "sde", "enabled").unwrap_or(true);
                let substeps = self.int(s, "sde", "substeps").unwrap_or(DEFAULT_SUBSTEPS as u64);
                let coupled = self.bool(s, "sde", "coupled").unwrap_or(true);
                if substeps == 0 {
                    self.err("`sde.substeps` must be ≥ 1");
                }
                if enabled && !matches!(oracle.noise(), NoiseKind::Gaussian { .. }) {
                    self.err("`[sde]` comparisons need Gaussian noise");
                }
                if enabled && algo == Algorithm::Adam && steps.is_some_and(|s| s == 0) {
                    self.err("`[sde]` comparisons for adam need `optimizer.steps` ≥ 1");
                }
                enabled.then_some(SdeRunSpec {
                    substeps: substeps as u32,
                    coupled,
                })
            }
            None => None,
        };
        Some(RunSpec {
            oracle,
            algo,
            hp: hp?,
            theta0: theta0?,
            u0,
            steps: steps?,
            checkpoints: checkpoints?,
            fns: fns?,
            seeds: seeds?,
            sde,
        })
    }

    fn constants(&mut self, root: &Table, algo: Algorithm) -> Option<SdeConstants> {
        let t = self.table(root, "sde", true)?;
        self.keys(t, "sde", &["sigma0", "epsilon0", "c1", "c2", "substeps", "coupled"]);
        let sigma0 = self.req_positive(t, "sde", "sigma0");
        let epsilon0 = self.f64(t, "sde", "epsilon0").unwrap_or(0.0);
        let c2 = if algo.is_adaptive() {
            self.req_positive(t, "sde", "c2")
        } else {
            Some(0.0)
        };
        let c1 = if algo == Algorithm::Adam {
            self.req_positive(t, "sde", "c1")
        } else {
            Some(0.0)
        };
        if epsilon0 < 0.0 {
            self.err("`sde.epsilon0` must be ≥ 0");
        }
        Some(SdeConstants {
            sigma0: sigma0?,
            epsilon0,
            c1: c1?,
            c2: c2?,
        })
    }

    fn moments(&mut self, root: &Table) -> Option<MomentsSpec> {
        let problem = self.problem(root)?;
        let noise = self.table(root, "noise", true)?;
        self.keys(noise, "noise", &["covariance", "scale", "matrix"]);
        let cov = self.covariance(noise, &problem);
        let t = self.table(root, "moments", true)?;
        self.keys(
            t,
            "moments",
            &["algorithm", "etas", "theta", "m", "u", "step", "samples", "tolerance"],
        );
        let algo = match self.req_str(t, "moments", "algorithm").map(Algorithm::parse) {
            Some(Ok(a)) if a.is_adaptive() => Some(a),
            Some(_) => {
                self.err("`moments.algorithm` must be rmsprop or adam");
                None
            }
            None => None,
        }?;
        let consts = self.constants(root, algo);
        let d = problem.dim();
        let etas = self.req_vec(t, "moments", "etas");
        if let Some(e) = &etas {
            if e.is_empty() || e.iter().any(|&x| !(x > 0.0)) {
                self.err("`moments.etas` must be non-empty and positive");
            }
        }
        let theta = self.dvec(t, "moments", "theta", d);
        if !t.contains_key("theta") {
            self.err("missing key `moments.theta`");
        }
        let m = if t.contains_key("m") {
            self.dvec(t, "moments", "m", d)
        } else {
            Some(DVector::zeros(d))
        };
        let u = if t.contains_key("u") {
            self.dvec(t, "moments", "u", d)
        } else {
            Some(DVector::from_element(d, 1.0))
        };
        let step = self.int(t, "moments", "step").unwrap_or(1);
        if algo == Algorithm::Adam && step == 0 {
            self.err("`moments.step` must be ≥ 1 for Adam");
        }
        let samples = self.int(t, "moments", "samples").unwrap_or(100_000) as usize;
        if samples < 1000 {
            self.err("`moments.samples` must be at least 1000");
        }
        let tolerance = self.f64(t, "moments", "tolerance");
        let consts = consts?;
        for &eta in etas.iter().flatten() {
            if eta > 0.0 {
                if let Err(e) = consts.to_discrete(algo, eta) {
                    self.err(format!("moments: η = {eta}: {e}"));
                }
            }
        }
        Some(MomentsSpec {
            problem,
            cov: cov?,
            algo,
            consts,
            etas: etas?,
            theta: theta?,
            m: m?,
            u: u?,
            step,
            samples,
            tolerance,
        })
    }

    fn order_sweep(&mut self, root: &Table, seeds: Option<usize>) -> Option<OrderSweepConfig> {
        let problem = self.problem(root)?;
        let noise = self.table(root, "noise", true)?;
        self.keys(noise, "noise", &["covariance", "scale", "matrix", "sigma"]);
        let cov = self.covariance(noise, &problem);
        let t = self.table(root, "sweep", true)?;
        self.keys(
            t,
            "sweep",
            &[
                "algorithm",
                "etas",
                "theta0",
                "theta0_offset",
                "u0",
                "t_end",
                "checkpoint_times",
                "substeps",
                "coupled",
                "warm_start",
                "expected_slope",
                "bootstrap",
            ],
        );
        let algo = self
            .req_str(t, "sweep", "algorithm")
            .map(Algorithm::parse)
            .and_then(|a| self.wrap("sweep", a))?;
        let consts = if algo.is_adaptive() {
            self.constants(root, algo)
        } else {
            Some(SdeConstants {
                sigma0: 0.0,
                epsilon0: 0.0,
                c1: 0.0,
                c2: 0.0,
            })
        };
        let sgd_sigma = if algo == Algorithm::Sgd {
            self.req_positive(noise, "noise", "sigma")
        } else {
            Some(0.0)
        };
        let etas = self.req_vec(t, "sweep", "etas");
        let theta0 = self.theta0(t, "sweep", &problem);
        let cov = cov?;
        let u0 = self.u0(t, "sweep", &problem, &cov, theta0.as_ref()?);
        let t_end = self.req_positive(t, "sweep", "t_end");
        let checkpoint_times = self
            .vec(t, "sweep", "checkpoint_times")
            .or_else(|| t_end.map(|te| vec![te]));
        let substeps = self.int(t, "sweep", "substeps").unwrap_or(DEFAULT_SUBSTEPS as u64);
        let coupled = self.bool(t, "sweep", "coupled").unwrap_or(true);
        let warm_start = self.f64(t, "sweep", "warm_start");
        let expected = match self.vec(t, "sweep", "expected_slope") {
            Some(v) if v.len() == 2 => Some((v[0], v[1])),
            Some(_) => {
                self.err("`sweep.expected_slope` must be [low, high]");
                None
            }
            None => Some(if algo == Algorithm::Sgd { (0.6, 1.4) } else { (1.6, 2.4) }),
        };
        let bootstrap = self.int(t, "sweep", "bootstrap").unwrap_or(DEFAULT_BOOTSTRAP as u64) as usize;
        let fns = self.functions(root, &problem, &cov, Some(algo));
        if algo == Algorithm::Adam && !warm_start.is_some_and(|w| w > 0.0) {
            self.err("`sweep.warm_start` must be > 0 for Adam");
        }
        let cfg = OrderSweepConfig {
            problem,
            cov,
            algo,
            consts: consts?,
            sgd_sigma: sgd_sigma?,
            theta0: theta0?,
            u0: u0?,
            t_end: t_end?,
            checkpoint_times: checkpoint_times?,
            etas: etas?,
            seeds: seeds?,
            substeps: substeps as u32,
            coupled,
            warm_start,
            fns: fns?,
            expected_slope: expected?,
            bootstrap,
            root_seed: 0,
        };
        // Preconditions of every cell, checked before any simulation.
        if let Err(e) = cfg.check() {
            self.err(format!("sweep: {e}"));
            return None;
        }
        Some(cfg)
    }

    fn svag_sweep(&mut self, root: &Table, seeds: Option<usize>) -> Option<SvagSweepConfig> {
        let problem = self.problem(root)?;
        let oracle = self.oracle(root, &problem);
        let opt = self.table(root, "optimizer", true)?;
        self.keys(
            opt,
            "optimizer",
            &[
                "algorithm",
                "eta",
                "beta",
                "beta1",
                "beta2",
                "epsilon",
                "theta0",
                "theta0_offset",
                "u0",
            ],
        );
        let t = self.table(root, "sweep", true)?;
        self.keys(t, "sweep", &["ells", "checkpoint_steps", "bootstrap"]);
        let algo = self.algorithm(opt)?;
        if !algo.is_adaptive() {
            self.err("svag-sweep needs rmsprop or adam");
        }
        let hp = self.hyperparams(opt, algo);
        let theta0 = self.theta0(opt, "optimizer", &problem);
        let oracle = oracle?;
        let u0 = self.u0(opt, "optimizer", &problem, &oracle.covariance_spec(), theta0.as_ref()?);
        let ells = self.req_vec(t, "sweep", "ells");
        if !t.contains_key("checkpoint_steps") {
            self.err("missing key `sweep.checkpoint_steps`");
        }
        let cps = self.ints(t, "sweep", "checkpoint_steps");
        let bootstrap = self.int(t, "sweep", "bootstrap").unwrap_or(DEFAULT_BOOTSTRAP as u64) as usize;
        let fns = self.functions(root, &problem, &oracle.covariance_spec(), Some(algo));
        let cfg = SvagSweepConfig {
            oracle,
            algo,
            hp: hp?,
            theta0: theta0?,
            u0: u0?,
            checkpoint_steps: cps?,
            ells: ells?,
            seeds: seeds?,
            fns: fns?,
            bootstrap,
            root_seed: 0,
        };
        if let Err(e) = crate::harness::svag::validate(&cfg) {
            self.err(format!("sweep: {e}"));
            return None;
        }
        Some(cfg)
    }

    fn rule(&mut self, s: &str, key: &str) -> Option<ScalingRule> {
        let r = match s {
            "sqrt-rmsprop" => Ok(ScalingRule::SquareRootRmsprop),
            "sqrt-adam" => Ok(ScalingRule::SquareRootAdam),
            "linear-sgd" => Ok(ScalingRule::LinearSgd),
            _ => {
                if let Some(tag) = s.strip_prefix("linear-").and_then(|t| t.chars().next()) {
                    ScaleFlags::linear_variant(tag).map(ScalingRule::LinearAdamVariant)
                } else if let Some(tag) = s.strip_prefix("partial-").and_then(|t| t.chars().next()) {
                    ScaleFlags::partial_sqrt_variant(tag).map(ScalingRule::PartialSquareRoot)
                } else {
                    self.err(format!(
                        "unknown rule `{s}` in `scaling.{key}` (sqrt-rmsprop, sqrt-adam, linear-sgd, linear-a..d, partial-a..e)"
                    ));
                    return None;
                }
            }
        };
        self.wrap("scaling", r)
    }

    fn scaling(&mut self, root: &Table, seeds: Option<usize>) -> Option<ScalingExperiment> {
        let problem = self.problem(root)?;
        let noise_t = self.table(root, "noise", true)?;
        self.keys(
            noise_t,
            "noise",
            &["type", "covariance", "scale", "matrix", "sigma", "batch_size"],
        );
        let noise = match self.str(noise_t, "noise", "type").unwrap_or("minibatch") {
            "minibatch" => self
                .req_int(noise_t, "noise", "batch_size")
                .map(|b| NoiseModel::Minibatch { batch_size: b as usize }),
            "gaussian" => {
                let cov = self.covariance(noise_t, &problem);
                let sigma = self.req_positive(noise_t, "noise", "sigma");
                Some(NoiseModel::Gaussian {
                    cov: cov?,
                    sigma: sigma?,
                })
            }
            other => {
                self.err(format!(
                    "unknown noise type `{other}` for validate-scaling (minibatch, gaussian)"
                ));
                None
            }
        };
        if let Some(NoiseModel::Minibatch { .. }) = noise {
            if !problem.is_finite_sum() {
                self.err("minibatch noise needs a least_squares problem");
            }
        }
        let opt = self.table(root, "optimizer", true)?;
        self.keys(
            opt,
            "optimizer",
            &[
                "algorithm",
                "eta",
                "beta",
                "beta1",
                "beta2",
                "epsilon",
                "theta0",
                "theta0_offset",
                "u0",
            ],
        );
        let t = self.table(root, "scaling", true)?;
        self.keys(
            t,
            "scaling",
            &[
                "rule",
                "kappas",
                "contrast",
                "checkpoint_steps",
                "shared_prefix",
                "z_threshold",
            ],
        );
        let algo = self.algorithm(opt)?;
        let hp = self.hyperparams(opt, algo);
        let theta0 = self.theta0(opt, "optimizer", &problem);
        let noise = noise?;
        let cov = match &noise {
            NoiseModel::Minibatch { .. } => CovarianceSpec::empirical(),
            NoiseModel::Gaussian { cov, .. } => cov.clone(),
        };
        let u0 = self.u0(opt, "optimizer", &problem, &cov, theta0.as_ref()?);
        let default_rule = match algo {
            Algorithm::Sgd => "linear-sgd",
            Algorithm::Rmsprop => "sqrt-rmsprop",
            Algorithm::Adam => "sqrt-adam",
        };
        let rule_s = self.str(t, "scaling", "rule").unwrap_or(default_rule);
        let rule = self.rule(rule_s, "rule");
        let contrast = match self.str(t, "scaling", "contrast") {
            Some(c) => Some(self.rule(c, "contrast")?),
            None => None,
        };
        let kappas = self.req_vec(t, "scaling", "kappas");
        if !t.contains_key("checkpoint_steps") {
            self.err("missing key `scaling.checkpoint_steps`");
        }
        let cps = self.ints(t, "scaling", "checkpoint_steps");
        let shared_prefix = self.int(t, "scaling", "shared_prefix");
        let z = self.f64(t, "scaling", "z_threshold").unwrap_or(4.0);
        let fns = self.functions(root, &problem, &cov, Some(algo));
        // Scaling preconditions (e.g. κ(1−β) < 1) surface here.
        let (rule, hp) = (rule?, hp?);
        for &kappa in kappas.iter().flatten() {
            for r in std::iter::once(rule).chain(contrast) {
                if let Err(e) = ScalingPlan::new(r, hp, kappa) {
                    self.err(format!("scaling: κ = {kappa}: {}", reason(&e)));
                }
            }
        }
        Some(ScalingExperiment {
            problem,
            noise,
            algo,
            base: hp,
            rule,
            kappas: kappas?,
            contrast,
            theta0: theta0?,
            u0: u0?,
            checkpoint_steps: cps?,
            seeds: seeds?,
            fns: fns?,
            shared_prefix,
            z_threshold: z,
            root_seed: 0,
        })
    }

    fn warmup(&mut self, root: &Table, seeds: Option<usize>) -> Option<WarmupSpec> {
        let t = self.table(root, "warmup", true)?;
        self.keys(t, "warmup", &["g_bar", "sigma", "eta", "k"]);
        let g = self.req_vec(t, "warmup", "g_bar");
        let sigma = self.req_positive(t, "warmup", "sigma");
        let eta = self.req_positive(t, "warmup", "eta");
        let k = self.req_int(t, "warmup", "k");
        let (g, sigma) = (g?, sigma?);
        let gmax = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if sigma < 100.0 * gmax {
            self.err(format!("warmup: sigma must be ≥ 100·max|g_bar| = {}", 100.0 * gmax));
        }
        Some(WarmupSpec {
            g_bar: DVector::from_vec(g),
            sigma,
            eta: eta?,
            k: k?,
            seeds: seeds?,
        })
    }

    fn noise_diag(&mut self, root: &Table) -> Option<NoiseDiagSpec> {
        let problem = self.problem(root)?;
        let oracle = self.oracle(root, &problem);
        let t = self.table(root, "diagnostics", true)?;
        self.keys(t, "diagnostics", &["theta", "samples"]);
        if !t.contains_key("theta") {
            self.err("missing key `diagnostics.theta`");
        }
        let theta = self.dvec(t, "diagnostics", "theta", problem.dim());
        let samples = self.int(t, "diagnostics", "samples").unwrap_or(100_000) as usize;
        if samples < 100 {
            self.err("`diagnostics.samples` must be at least 100");
        }
        Some(NoiseDiagSpec {
            oracle: oracle?,
            theta: theta?,
            samples,
        })
    }
}

fn reason(e: &Error) -> String {
    match e {
        Error::InvalidParameter { reason, .. } => reason.clone(),
        other => other.to_string(),
    }
}

/// Gaussian design `x ~ N(0, 1)` with targets `y = scale · N(0, 1)`.
pub fn synthetic_least_squares(n: usize, d: usize, residual_scale: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let y = DVector::from_fn(n, |_, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        residual_scale * e
    });
    (x, y)
}

//! Executes a validated experiment and writes its artifacts.
//!
//! Each experiment writes `<kind>.json` (the full report) and one or more CSV
//! tables into the output directory. Every file starts with the config
//! fingerprint. Outputs depend only on the config text and the root seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ExperimentSpec, MomentsSpec, NoiseDiagSpec, RunSpec, WarmupSpec};
use crate::error::{Error, Result};
use crate::harness::order::{run_cell, Cell};
use crate::harness::{
    linear_warmup_check, order_sweep, svag_sweep, validate_scaling, weak_error, KappaReport, OrderReport,
    ScalingReport, Status, SvagReport,
};
use crate::moments::{
    analytic_adam_moments, analytic_rmsprop_moments, compare_moments, default_tolerance, mc_discrete_moments,
    MomentComparisonReport,
};
use crate::ngos::{estimate_noise_moments, noise_dominance_ratio, GradientOracle};
use crate::optimizers::{run_discrete, Algorithm, OptimizerState};
use crate::record::{TestFunctionSet, TrajectoryRecord};
use crate::sde::{build_adam_sde, build_rmsprop_sde, build_sgd_sde_scaled, SdeConstants};
use crate::streams::derive_seed;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub root_seed: u64,
    pub out_dir: PathBuf,
    /// Treat inconclusive results as failures of their own (exit 2).
    pub strict: bool,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: Status,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    /// 0 on pass, 1 on fail, 2 on inconclusive or undefined under `strict`.
    pub fn exit_code(&self, strict: bool) -> u8 {
        match self.status {
            Status::Pass => 0,
            Status::Fail => 1,
            Status::Inconclusive | Status::Undefined => u8::from(strict) * 2,
        }
    }
}

/// Process exit code for an error: 3 for I/O, 4 for an invalid config, 1 otherwise.
pub fn error_exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Config(_) => 4,
        _ => 1,
    }
}

struct Artifacts {
    status: Status,
    report: Value,
    tables: Vec<(String, Table)>,
    summary: String,
}

/// CSV table with a header row.
struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, path: &FsPath, fingerprint: &str) -> Result<()> {
        let mut buf = format!("# config_sha256={fingerprint}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.header).map_err(csv_err)?;
            for r in &self.rows {
                w.write_record(r).map_err(csv_err)?;
            }
            w.flush()?;
        }
        fs::write(path, buf)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialise")
}

/// Runs the experiment, writes `<kind>.json` and CSV tables, and returns the
/// status with a short text summary.
pub fn execute(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let root = opts.root_seed;
    let a = match &cfg.spec {
        ExperimentSpec::Run(r) => run(r, root)?,
        ExperimentSpec::Moments(m) => moments(m, root)?,
        ExperimentSpec::OrderSweep(c) => {
            let mut c = c.clone();
            c.root_seed = root;
            order(order_sweep(&c)?)
        }
        ExperimentSpec::SvagSweep(c) => {
            let mut c = c.clone();
            c.root_seed = root;
            svag(svag_sweep(&c)?, c.hp.eta)
        }
        ExperimentSpec::ValidateScaling(e) => {
            let mut e = e.clone();
            e.root_seed = root;
            scaling(validate_scaling(&e)?)
        }
        ExperimentSpec::WarmupCheck(w) => warmup(w, root)?,
        ExperimentSpec::NoiseDiag(n) => noise_diag(n, root)?,
    };
    fs::create_dir_all(&opts.out_dir)?;
    let kind = cfg.kind.name();
    let mut files = Vec::new();
    let doc = json!({
        "kind": kind,
        "config_sha256": cfg.fingerprint,
        "root_seed": root,
        "status": a.status,
        "report": a.report,
    });
    let json_path = opts.out_dir.join(format!("{kind}.json"));
    let mut text = serde_json::to_string_pretty(&doc).expect("json");
    text.push('\n');
    fs::write(&json_path, text)?;
    files.push(json_path);
    for (name, table) in &a.tables {
        let path = opts.out_dir.join(format!("{name}.csv"));
        table.write(&path, &cfg.fingerprint)?;
        files.push(path);
    }
    let mut summary = format!("{kind}: {}\n", status_word(a.status));
    summary.push_str(&a.summary);
    for f in &files {
        let _ = writeln!(summary, "wrote {}", f.display());
    }
    Ok(Outcome {
        status: a.status,
        summary,
        files,
    })
}

fn status_word(s: Status) -> &'static str {
    match s {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Inconclusive => "INCONCLUSIVE",
        Status::Undefined => "UNDEFINED",
    }
}

/// Rows `t, k, function, mean, se, n_seeds`; `k` is `round(t / ets)`.
fn trajectory_table(rec: &TrajectoryRecord, ets: f64) -> Table {
    let mut t = Table::new(&["t", "k", "function", "mean", "se", "n_seeds"]);
    fill_trajectory(&mut t, rec, ets, &[]);
    t
}

fn fill_trajectory(table: &mut Table, rec: &TrajectoryRecord, ets: f64, prefix: &[String]) {
    for (c, cp) in rec.checkpoints.iter().enumerate() {
        for (f, name) in rec.function_names.iter().enumerate() {
            let (mean, se) = rec.mean_se(f, c);
            let mut row = prefix.to_vec();
            row.extend([
                num(cp.t),
                format!("{}", (cp.t / ets).round() as u64),
                name.clone(),
                num(mean),
                num(se),
                rec.n_seeds().to_string(),
            ]);
            table.push(row);
        }
    }
}

fn trajectory_summary(rec: &TrajectoryRecord) -> Value {
    let rows: Vec<Value> = rec
        .checkpoints
        .iter()
        .enumerate()
        .map(|(c, cp)| {
            let fns: serde_json::Map<String, Value> = rec
                .function_names
                .iter()
                .enumerate()
                .map(|(f, name)| {
                    let (mean, se) = rec.mean_se(f, c);
                    (name.clone(), json!({ "mean": mean, "se": se }))
                })
                .collect();
            json!({ "t": cp.t, "functions": fns })
        })
        .collect();
    json!({ "n_seeds": rec.n_seeds(), "checkpoints": rows })
}

fn run(r: &RunSpec, root: u64) -> Result<Artifacts> {
    let problem = r.oracle.problem().clone();
    let cov = r.oracle.covariance_spec();
    let fns = TestFunctionSet::new(problem.clone(), cov.clone(), r.fns.clone())?;
    let sigma = r.oracle.sigma_effective();
    let v0 = if r.algo.is_adaptive() {
        if sigma > 0.0 {
            &r.u0 * (sigma * sigma)
        } else {
            r.u0.clone()
        }
    } else {
        DVector::zeros(problem.dim())
    };
    let init = OptimizerState::new(r.theta0.clone(), v0)?;
    let ets = r.algo.time_per_step(r.hp.eta);
    let cell_seed = derive_seed(root, "run");
    let seeds: Vec<u64> = (0..r.seeds as u64).collect();
    let Some(sde) = r.sde else {
        let rec = run_discrete(
            &r.oracle,
            r.algo,
            &r.hp,
            &init,
            r.steps,
            &fns,
            &r.checkpoints,
            cell_seed,
            &seeds,
        )?;
        let mut summary = String::new();
        if let Some(last) = rec.checkpoints.last() {
            let _ = writeln!(
                summary,
                "{} seeds, {} checkpoints, final t = {}",
                rec.n_seeds(),
                rec.checkpoints.len(),
                last.t
            );
            for (f, name) in rec.function_names.iter().enumerate() {
                let (m, se) = rec.mean_se(f, rec.checkpoints.len() - 1);
                let _ = writeln!(summary, "  {name:<14} {m:>12.6} ± {se:.2e}");
            }
        }
        return Ok(Artifacts {
            status: Status::Pass,
            report: json!({ "algorithm": r.algo, "discrete": trajectory_summary(&rec) }),
            tables: vec![("discrete".into(), trajectory_table(&rec, ets))],
            summary,
        });
    };
    let system = match r.algo {
        Algorithm::Sgd => build_sgd_sde_scaled(problem.clone(), cov.clone(), r.hp.eta, sigma)?,
        Algorithm::Rmsprop => {
            let k = SdeConstants::from_discrete(r.algo, &r.hp, sigma)?;
            build_rmsprop_sde(problem.clone(), cov.clone(), k.sigma0, k.epsilon0, k.c2)?
        }
        Algorithm::Adam => {
            let k = SdeConstants::from_discrete(r.algo, &r.hp, sigma)?;
            build_adam_sde(problem.clone(), cov.clone(), k.sigma0, k.epsilon0, k.c1, k.c2)?
        }
    };
    // Adam's SDE is singular at t = 0, so both sides start after one shared step.
    let prefix_steps = u64::from(r.algo == Algorithm::Adam);
    let ks: Vec<u64> = r.checkpoints.iter().copied().filter(|&k| k >= prefix_steps).collect();
    let cell = Cell {
        oracle: r.oracle.clone(),
        hp: r.hp,
        sigma,
        system,
        init,
        prefix_steps,
        steps: r.steps - prefix_steps,
        rel_checkpoints: ks.iter().map(|k| k - prefix_steps).collect(),
        times: ks.iter().map(|&k| k as f64 * ets).collect(),
        ets,
    };
    let (d, s) = run_cell(r.algo, r.seeds, sde.substeps, sde.coupled, &cell, &fns, cell_seed)?;
    let weak = weak_error(&d, &s, ets, sde.coupled)?;
    let mut summary = format!(
        "{} seeds, SDE dt = ets/{}, coupled = {}\n",
        r.seeds, sde.substeps, sde.coupled
    );
    for f in &weak.functions {
        let _ = writeln!(
            summary,
            "  {:<14} max gap {:.4e} ± {:.1e} at t = {}",
            f.name, f.max_gap, f.max_gap_se, f.argmax_t
        );
    }
    Ok(Artifacts {
        status: Status::Pass,
        report: json!({
            "algorithm": r.algo,
            "discrete": trajectory_summary(&d),
            "sde": trajectory_summary(&s),
            "weak_error": to_json(&weak),
        }),
        tables: vec![
            ("discrete".into(), trajectory_table(&d, ets)),
            ("sde".into(), trajectory_table(&s, ets)),
        ],
        summary,
    })
}

fn moments(m: &MomentsSpec, root: u64) -> Result<Artifacts> {
    let d = m.problem.dim();
    let mut x: Vec<f64> = m.theta.iter().copied().collect();
    if m.algo == Algorithm::Adam {
        x.extend(m.m.iter());
    }
    x.extend(m.u.iter());
    let x = DVector::from_vec(x);
    let mut raw = Vec::new();
    for &eta in &m.etas {
        let (hp, sigma) = m.consts.to_discrete(m.algo, eta)?;
        let oracle = GradientOracle::gaussian(m.problem.clone(), m.cov.clone(), sigma)?;
        let analytic = match m.algo {
            Algorithm::Adam => analytic_adam_moments(&m.problem, &m.cov, &m.theta, &m.m, &m.u, &m.consts, eta, m.step)?,
            _ => analytic_rmsprop_moments(&m.problem, &m.cov, &m.theta, &m.u, &m.consts, eta)?,
        };
        let seed = derive_seed(root, &format!("moments/{}/eta={eta}", m.algo.name()));
        let mc = mc_discrete_moments(&oracle, m.algo, &hp, &x, m.step, m.samples, seed)?;
        raw.push((eta, analytic, mc));
    }
    let tolerance = match m.tolerance {
        Some(t) => t,
        None => {
            let (_, a, b) = raw
                .iter()
                .min_by(|p, q| p.0.total_cmp(&q.0))
                .expect("etas are non-empty");
            default_tolerance(&compare_moments(a, b, 0.0)?)
        }
    };
    let reports: Vec<MomentComparisonReport> = raw
        .iter()
        .map(|(_, a, b)| compare_moments(a, b, tolerance))
        .collect::<Result<_>>()?;
    let status = if reports.iter().all(|r| r.pass) {
        Status::Pass
    } else {
        Status::Fail
    };
    let mut table = Table::new(&["eta", "moment", "index", "analytic", "mc", "se", "gap", "pass"]);
    let mut summary = format!("dim {d}, {} samples, tolerance {tolerance:.3e}·η⁴\n", m.samples);
    for r in &reports {
        for (label, entries) in [("first", &r.first), ("second", &r.second), ("third", &r.third)] {
            for e in entries.iter() {
                let idx: Vec<String> = e.index.iter().map(|i| i.to_string()).collect();
                table.push(vec![
                    num(r.eta),
                    label.into(),
                    idx.join(" "),
                    num(e.a),
                    num(e.b),
                    num(e.se),
                    num(e.gap),
                    e.pass.to_string(),
                ]);
            }
        }
        let failed = r.entries().filter(|e| !e.pass).count();
        let _ = writeln!(
            summary,
            "  η = {:<8} max gap/η⁴ {:.3e}, {failed} entries outside tolerance",
            r.eta,
            r.max_gap_over_eta4()
        );
    }
    Ok(Artifacts {
        status,
        report: json!({ "algorithm": m.algo, "tolerance": tolerance, "comparisons": to_json(&reports) }),
        tables: vec![("moments".into(), table)],
        summary,
    })
}

fn order(r: OrderReport) -> Artifacts {
    let mut table = Table::new(&["eta", "function", "max_gap", "se"]);
    let mut summary = String::new();
    for f in &r.functions {
        for (i, &eta) in r.etas.iter().enumerate() {
            table.push(vec![num(eta), f.name.clone(), num(f.max_gaps[i]), num(f.gap_ses[i])]);
        }
        let _ = writeln!(
            summary,
            "  {:<14} slope {} (expected {}..{}) {}",
            f.name,
            f.slope.map_or("n/a".into(), |s| format!("{s:.3}")),
            r.expected_slope.0,
            r.expected_slope.1,
            status_word(f.status)
        );
    }
    Artifacts {
        status: r.status,
        report: to_json(&r),
        tables: vec![("order".into(), table)],
        summary,
    }
}

/// Trajectory rows carry the base-run step `k`; the ℓ run took `ℓ²k` steps.
fn svag(r: SvagReport, eta: f64) -> Artifacts {
    let mut traj = Table::new(&["ell", "t", "k", "function", "mean", "se", "n_seeds"]);
    let ets = r.algorithm.time_per_step(eta);
    for (i, rec) in r.records.iter().enumerate() {
        let ell = r.ells[i];
        let mut t = Table::new(&[]);
        fill_trajectory(&mut t, rec, ets, &[num(ell)]);
        traj.rows.extend(t.rows);
    }
    let mut disc = Table::new(&["ell_a", "ell_b", "function", "max_gap", "se", "argmax_t"]);
    let mut summary = String::new();
    for f in &r.functions {
        for d in &f.discrepancies {
            disc.push(vec![
                num(d.ell_a),
                num(d.ell_b),
                f.name.clone(),
                num(d.max_gap),
                num(d.se),
                num(d.argmax_t),
            ]);
        }
        let gaps: Vec<String> = f.discrepancies.iter().map(|d| format!("{:.3e}", d.max_gap)).collect();
        let _ = writeln!(
            summary,
            "  {:<14} D = [{}] {}",
            f.name,
            gaps.join(", "),
            status_word(f.status)
        );
    }
    Artifacts {
        status: r.status,
        report: to_json(&r),
        tables: vec![("svag".into(), traj), ("svag_discrepancy".into(), disc)],
        summary,
    }
}

fn kappa_rows(table: &mut Table, rule: &str, reports: &[KappaReport]) {
    for k in reports {
        for row in &k.rows {
            table.push(vec![
                rule.into(),
                num(k.kappa),
                num(row.t),
                row.function.clone(),
                row.base_k.to_string(),
                row.scaled_k.to_string(),
                num(row.mean_base),
                num(row.se_base),
                num(row.mean_scaled),
                num(row.se_scaled),
                num(row.z),
            ]);
        }
    }
}

fn scaling(r: ScalingReport) -> Artifacts {
    let mut table = Table::new(&[
        "rule",
        "kappa",
        "t",
        "g",
        "base_k",
        "scaled_k",
        "mean_base",
        "se_base",
        "mean_scaled",
        "se_scaled",
        "z",
    ]);
    kappa_rows(&mut table, "rule", &r.kappas);
    kappa_rows(&mut table, "contrast", &r.contrast);
    let mut summary = String::new();
    for (label, reports) in [("rule", &r.kappas), ("contrast", &r.contrast)] {
        for k in reports.iter() {
            let _ = writeln!(
                summary,
                "  {label:<8} κ = {:<4} max|z| = {:.2} (threshold {}) {}",
                k.kappa,
                k.max_abs_z,
                r.z_threshold,
                status_word(k.status)
            );
        }
    }
    Artifacts {
        status: r.status,
        report: to_json(&r),
        tables: vec![("scaling".into(), table)],
        summary,
    }
}

fn warmup(w: &WarmupSpec, root: u64) -> Result<Artifacts> {
    let r = linear_warmup_check(&w.g_bar, w.sigma, w.eta, w.k, w.seeds, derive_seed(root, "warmup"))?;
    let mut table = Table::new(&[
        "coordinate",
        "mean",
        "mean_se",
        "exact_mean",
        "approx_mean",
        "variance",
        "variance_se",
        "exact_variance",
        "approx_variance",
    ]);
    for (i, c) in r.coordinates.iter().enumerate() {
        table.push(vec![
            i.to_string(),
            num(c.mean),
            num(c.mean_se),
            num(c.exact_mean),
            num(c.approx_mean),
            num(c.variance),
            num(c.variance_se),
            num(c.exact_variance),
            num(c.approx_variance),
        ]);
    }
    let summary = format!(
        "  k = {}, {} seeds: max |z| = {:.2}, max approximation residual = {:.3e}\n",
        r.k, r.seeds, r.max_abs_z, r.max_residual
    );
    Ok(Artifacts {
        status: r.status,
        report: to_json(&r),
        tables: vec![("warmup".into(), table)],
        summary,
    })
}

fn noise_diag(n: &NoiseDiagSpec, root: u64) -> Result<Artifacts> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root, "noise-diag"));
    let r = estimate_noise_moments(&n.oracle, &n.theta, n.samples, &mut rng)?;
    let ratio = noise_dominance_ratio(&n.oracle, &n.theta, n.samples, &mut rng)?;
    let exact = n.oracle.covariance_spec().covariance(n.oracle.problem(), &n.theta)?;
    let d = r.dim();
    let mut table = Table::new(&["i", "j", "covariance", "se", "exact", "z"]);
    let mut max_z: f64 = 0.0;
    for i in 0..d {
        for j in i..d {
            let (c, se, e) = (r.covariance[i * d + j], r.covariance_se[i * d + j], exact[(i, j)]);
            let z = if se > 0.0 {
                (c - e) / se
            } else if c == e {
                0.0
            } else {
                f64::INFINITY
            };
            max_z = max_z.max(z.abs());
            table.push(vec![i.to_string(), j.to_string(), num(c), num(se), num(e), num(z)]);
        }
    }
    let status = if max_z <= 4.0 { Status::Pass } else { Status::Fail };
    let summary = format!(
        "  σ = {}, {} samples: covariance max |z| = {max_z:.2}, max |E z³| = {:.3e}, noise/gradient ratio = {ratio:.3e}\n",
        n.oracle.sigma_effective(),
        r.sample_count,
        r.third_moment_norm
    );
    Ok(Artifacts {
        status,
        report: json!({
            "sigma": n.oracle.sigma_effective(),
            "moments": to_json(&r),
            "exact_covariance": exact.transpose().as_slice().to_vec(),
            "covariance_max_abs_z": max_z,
            "noise_dominance_ratio": ratio,
        }),
        tables: vec![("noise_diag".into(), table)],
        summary,
    })
}

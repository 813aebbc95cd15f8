//! One-step moments of the discrete updates and of their SDEs, in
//! `u = v/σ²` coordinates.
//!
//! For a state `x` the discrete one-step difference is `Δ = x_{k+1} − x_k`
//! and the continuous one is `Δ̃ = X_{t+η²} − x`. Analytic formulas give the
//! exact first moments and the leading `O(η²)` second moments; entries whose
//! leading term vanishes are reported as higher order (value 0).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, invalid, Error, Result};
use crate::ngos::GradientOracle;
use crate::optimizers::{update, Algorithm, HyperParams, OptimizerState};
use crate::problems::{CovarianceSpec, Problem};
use crate::sde::{em_endpoint, SdeConstants, SdeState, SdeSystem};
use crate::streams::{path_rng, RngNormals};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MomentSource {
    AnalyticDiscrete,
    McDiscrete,
    McSde,
}

/// How an analytic entry relates to the true moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EntryOrder {
    /// Exact value (or a Monte-Carlo estimate).
    Exact,
    /// Leading `O(η²)` term; the remainder is `O(η⁴)`.
    Leading,
    /// No `O(η²)` term; the value 0 stands for an `O(η⁴)` quantity.
    HigherOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEntry {
    pub index: Vec<usize>,
    pub value: f64,
    /// Standard error (0 for analytic entries).
    pub se: f64,
    pub order: EntryOrder,
}

/// First, second (`i ≤ j`) and selected third moments of a one-step difference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneStepMoments {
    pub dim: usize,
    pub eta: f64,
    pub source: MomentSource,
    pub samples: usize,
    pub first: Vec<MomentEntry>,
    pub second: Vec<MomentEntry>,
    pub third: Vec<MomentEntry>,
}

impl OneStepMoments {
    pub fn first_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.first.iter().map(|e| e.value))
    }

    /// Symmetric second-moment matrix.
    pub fn second_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for e in &self.second {
            let (i, j) = (e.index[0], e.index[1]);
            m[(i, j)] = e.value;
            m[(j, i)] = e.value;
        }
        m
    }

    pub fn second_entry(&self, i: usize, j: usize) -> &MomentEntry {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.second
            .iter()
            .find(|e| e.index[0] == a && e.index[1] == b)
            .expect("every i <= j pair is stored")
    }
}

const THIRD_OFFDIAGONAL: usize = 20;
const THIRD_SEED: u64 = 0x3d3d_0001;

/// Diagonal triples plus up to 20 off-diagonal triples chosen with a fixed seed.
pub fn third_moment_indices(dim: usize) -> Vec<[usize; 3]> {
    let mut out: Vec<[usize; 3]> = (0..dim).map(|i| [i, i, i]).collect();
    let mut off = Vec::new();
    for i in 0..dim {
        for j in i..dim {
            for k in j..dim {
                if !(i == j && j == k) {
                    off.push([i, j, k]);
                }
            }
        }
    }
    if off.len() > THIRD_OFFDIAGONAL {
        let mut rng = ChaCha8Rng::seed_from_u64(THIRD_SEED);
        // Partial Fisher–Yates: the first 20 positions become a uniform sample.
        for p in 0..THIRD_OFFDIAGONAL {
            let q = rng.random_range(p..off.len());
            off.swap(p, q);
        }
        off.truncate(THIRD_OFFDIAGONAL);
        off.sort_unstable();
    }
    out.extend(off);
    out
}

fn pairs(dim: usize) -> Vec<[usize; 2]> {
    (0..dim).flat_map(|i| (i..dim).map(move |j| [i, j])).collect()
}

fn analytic(dim: usize, eta: f64, first: Vec<f64>, second: impl Fn(usize, usize) -> Option<f64>) -> OneStepMoments {
    let first = first
        .into_iter()
        .enumerate()
        .map(|(i, value)| MomentEntry {
            index: vec![i],
            value,
            se: 0.0,
            order: EntryOrder::Exact,
        })
        .collect();
    let second = pairs(dim)
        .into_iter()
        .map(|[i, j]| match second(i, j) {
            Some(value) => MomentEntry {
                index: vec![i, j],
                value,
                se: 0.0,
                order: EntryOrder::Leading,
            },
            None => MomentEntry {
                index: vec![i, j],
                value: 0.0,
                se: 0.0,
                order: EntryOrder::HigherOrder,
            },
        })
        .collect();
    let third = third_moment_indices(dim)
        .into_iter()
        .map(|t| MomentEntry {
            index: t.to_vec(),
            value: 0.0,
            se: 0.0,
            order: EntryOrder::HigherOrder,
        })
        .collect();
    OneStepMoments {
        dim,
        eta,
        source: MomentSource::AnalyticDiscrete,
        samples: 0,
        first,
        second,
        third,
    }
}

fn check_u(u: &DVector<f64>) -> Result<()> {
    for (i, &v) in u.iter().enumerate() {
        if !(v > 0.0) {
            return Err(Error::NonPositiveU {
                index: i,
                value: v,
                time: f64::NAN,
            });
        }
    }
    Ok(())
}

/// Discrete RMSprop one-step moments at `x = (θ, u)`.
///
/// `E[Δᵢ] = −η²∂ᵢf/(σ₀√uᵢ+ε₀)`, `E[Δ_{d+i}] = η²c₂((∂ᵢf/σ)² + Σᵢᵢ − uᵢ)` with
/// `σ = σ₀/η`, and leading `E[ΔᵢΔⱼ] = η²Σᵢⱼ/((√uᵢ+ε₀/σ₀)(√uⱼ+ε₀/σ₀))`.
pub fn analytic_rmsprop_moments(
    problem: &Problem,
    cov: &CovarianceSpec,
    theta: &DVector<f64>,
    u: &DVector<f64>,
    k: &SdeConstants,
    eta: f64,
) -> Result<OneStepMoments> {
    let d = problem.dim();
    check_dim(d, theta.len())?;
    check_dim(d, u.len())?;
    check_u(u)?;
    let e2 = eta * eta;
    let sigma = k.sigma0 / eta;
    let grad = problem.full_gradient(theta)?;
    let s = cov.covariance(problem, theta)?;
    let mut first = vec![0.0; 2 * d];
    for i in 0..d {
        first[i] = -e2 * grad[i] / (k.sigma0 * u[i].sqrt() + k.epsilon0);
        first[d + i] = e2 * k.c2 * ((grad[i] / sigma).powi(2) + s[(i, i)] - u[i]);
    }
    let den = |i: usize| u[i].sqrt() + k.epsilon0 / k.sigma0;
    Ok(analytic(2 * d, eta, first, |i, j| {
        (i < d && j < d).then(|| e2 * s[(i, j)] / (den(i) * den(j)))
    }))
}

/// Discrete Adam one-step moments at `x = (θ, m, u)` before step `k ≥ 1`.
///
/// `E[Δᵢ] = −(√γ₂/γ₁)η²(mᵢ + c₁η²(∂ᵢf − mᵢ))/(σ₀√uᵢ + ε₀√γ₂)` with
/// `γ₁ = 1−β₁^{k+1}`, `γ₂ = 1−β₂^k`; `E[Δ_{d+i}] = c₁η²(∂ᵢf − mᵢ)`;
/// `E[Δ_{2d+i}] = c₂η²((∂ᵢf/σ)² + Σᵢᵢ − uᵢ)`; leading
/// `E[Δ_{d+i}Δ_{d+j}] = c₁²σ₀²η²Σᵢⱼ`.
#[allow(clippy::too_many_arguments)]
pub fn analytic_adam_moments(
    problem: &Problem,
    cov: &CovarianceSpec,
    theta: &DVector<f64>,
    m: &DVector<f64>,
    u: &DVector<f64>,
    k: &SdeConstants,
    eta: f64,
    step: u64,
) -> Result<OneStepMoments> {
    if step == 0 {
        return Err(invalid("k", "Adam moments need k >= 1 (1 - beta2^0 = 0)"));
    }
    let d = problem.dim();
    check_dim(d, theta.len())?;
    check_dim(d, m.len())?;
    check_dim(d, u.len())?;
    check_u(u)?;
    let e2 = eta * eta;
    let sigma = k.sigma0 / eta;
    let beta1 = 1.0 - k.c1 * e2;
    let beta2 = 1.0 - k.c2 * e2;
    let g1 = 1.0 - beta1.powf((step + 1) as f64);
    let g2 = 1.0 - beta2.powf(step as f64);
    let sg2 = g2.sqrt();
    let grad = problem.full_gradient(theta)?;
    let s = cov.covariance(problem, theta)?;
    let mut first = vec![0.0; 3 * d];
    for i in 0..d {
        let m_next = m[i] + k.c1 * e2 * (grad[i] - m[i]);
        first[i] = -(sg2 / g1) * e2 * m_next / (k.sigma0 * u[i].sqrt() + k.epsilon0 * sg2);
        first[d + i] = k.c1 * e2 * (grad[i] - m[i]);
        first[2 * d + i] = k.c2 * e2 * ((grad[i] / sigma).powi(2) + s[(i, i)] - u[i]);
    }
    let c = k.c1 * k.c1 * k.sigma0 * k.sigma0 * e2;
    Ok(analytic(3 * d, eta, first, |i, j| {
        ((d..2 * d).contains(&i) && (d..2 * d).contains(&j)).then(|| c * s[(i - d, j - d)])
    }))
}

/// Streaming sums of `Δ`, `ΔᵢΔⱼ` and selected `ΔᵢΔⱼΔₖ`, with their squares.
#[derive(Debug, Clone)]
struct Accumulator {
    dim: usize,
    pairs: Vec<[usize; 2]>,
    triples: Vec<[usize; 3]>,
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Accumulator {
    fn new(dim: usize) -> Self {
        let pairs = pairs(dim);
        let triples = third_moment_indices(dim);
        let width = dim + pairs.len() + triples.len();
        Self {
            dim,
            pairs,
            triples,
            n: 0,
            sum: vec![0.0; width],
            sum_sq: vec![0.0; width],
        }
    }

    fn push(&mut self, delta: &[f64]) {
        let mut add = |slot: usize, v: f64| {
            self.sum[slot] += v;
            self.sum_sq[slot] += v * v;
        };
        for (i, &x) in delta.iter().enumerate() {
            add(i, x);
        }
        let base = self.dim;
        for (p, &[i, j]) in self.pairs.iter().enumerate() {
            add(base + p, delta[i] * delta[j]);
        }
        let base = self.dim + self.pairs.len();
        for (t, &[i, j, k]) in self.triples.iter().enumerate() {
            add(base + t, delta[i] * delta[j] * delta[k]);
        }
        self.n += 1;
    }

    fn merge(mut self, other: &Self) -> Self {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.n += other.n;
        self
    }

    fn finish(&self, eta: f64, source: MomentSource) -> OneStepMoments {
        let n = self.n as f64;
        let entry = |slot: usize, index: Vec<usize>| {
            let mean = self.sum[slot] / n;
            let var = ((self.sum_sq[slot] - n * mean * mean) / (n - 1.0)).max(0.0);
            MomentEntry {
                index,
                value: mean,
                se: (var / n).sqrt(),
                order: EntryOrder::Exact,
            }
        };
        let d = self.dim;
        let np = self.pairs.len();
        OneStepMoments {
            dim: d,
            eta,
            source,
            samples: self.n,
            first: (0..d).map(|i| entry(i, vec![i])).collect(),
            second: self
                .pairs
                .iter()
                .enumerate()
                .map(|(p, ij)| entry(d + p, ij.to_vec()))
                .collect(),
            third: self
                .triples
                .iter()
                .enumerate()
                .map(|(t, ijk)| entry(d + np + t, ijk.to_vec()))
                .collect(),
        }
    }
}

const CHUNK: usize = 4096;

/// Sums `samples` one-step differences drawn by `draw(chunk_rng, out)`.
/// Chunks use independent streams and are reduced in order, so the result
/// does not depend on the thread count.
fn accumulate<F>(dim: usize, samples: usize, seed: u64, draw: F) -> Result<Accumulator>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) -> Result<()> + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = path_rng(seed, c as u64);
            let mut acc = Accumulator::new(dim);
            let mut delta = vec![0.0; dim];
            let count = CHUNK.min(samples - c * CHUNK);
            for _ in 0..count {
                draw(&mut rng, &mut delta)?;
                acc.push(&delta);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().fold(Accumulator::new(dim), |a, b| a.merge(b)))
}

/// Monte-Carlo moments of one discrete step from `x` (SDE layout, `u`
/// coordinates) at step index `k`. The oracle's scale σ converts `u ↔ v`.
pub fn mc_discrete_moments(
    oracle: &GradientOracle,
    algo: Algorithm,
    hp: &HyperParams,
    x: &DVector<f64>,
    k: u64,
    samples: usize,
    seed: u64,
) -> Result<OneStepMoments> {
    if samples < 1000 {
        return Err(invalid("samples", format!("need at least 1000, got {samples}")));
    }
    hp.validate()?;
    let d = oracle.problem().dim();
    let dim = match algo {
        Algorithm::Sgd => d,
        Algorithm::Rmsprop => 2 * d,
        Algorithm::Adam => 3 * d,
    };
    check_dim(dim, x.len())?;
    let sigma = oracle.sigma_effective();
    let (v_scale, u_scale) = if sigma == 0.0 {
        (1.0, 1.0)
    } else {
        (sigma * sigma, 1.0 / (sigma * sigma))
    };
    let theta = x.rows(0, d).into_owned();
    let (m, u) = match algo {
        Algorithm::Sgd => (DVector::zeros(d), DVector::zeros(d)),
        Algorithm::Rmsprop => (DVector::zeros(d), x.rows(d, d).into_owned()),
        Algorithm::Adam => (x.rows(d, d).into_owned(), x.rows(2 * d, d).into_owned()),
    };
    let start = OptimizerState {
        theta,
        m,
        v: &u * v_scale,
        k,
    };
    let acc = accumulate(dim, samples, seed, |rng, delta| {
        let mut s = start.clone();
        let g = oracle.sample_gradient(&s.theta, rng)?;
        update(algo, &mut s, &g, hp)?;
        for i in 0..d {
            delta[i] = s.theta[i] - start.theta[i];
            match algo {
                Algorithm::Sgd => {}
                Algorithm::Rmsprop => delta[d + i] = (s.v[i] - start.v[i]) * u_scale,
                Algorithm::Adam => {
                    delta[d + i] = s.m[i] - start.m[i];
                    delta[2 * d + i] = (s.v[i] - start.v[i]) * u_scale;
                }
            }
        }
        Ok(())
    })?;
    Ok(acc.finish(hp.eta, MomentSource::McDiscrete))
}

/// Monte-Carlo moments of `X_{t+η²} − x` under Euler–Maruyama with a step no
/// larger than `dt` (which must be at most `η²/10`).
pub fn mc_sde_moments(
    system: &SdeSystem,
    x: &DVector<f64>,
    t: f64,
    eta: f64,
    samples: usize,
    dt: f64,
    seed: u64,
) -> Result<OneStepMoments> {
    if samples < 1000 {
        return Err(invalid("samples", format!("need at least 1000, got {samples}")));
    }
    let h = eta * eta;
    if !(dt > 0.0 && dt <= h / 10.0 * (1.0 + 1e-12)) {
        return Err(invalid(
            "dt",
            format!("must lie in (0, eta^2/10 = {}], got {dt}", h / 10.0),
        ));
    }
    let dim = system.state_dim();
    check_dim(dim, x.len())?;
    let n_steps = (h / dt - 1e-9).ceil() as u64;
    let step = h / n_steps as f64;
    let init = SdeState::new(x.clone(), t);
    let acc = accumulate(dim, samples, seed, |rng, delta| {
        let end = em_endpoint(system, &init, n_steps, step, &mut RngNormals(rng))?;
        for i in 0..dim {
            delta[i] = end[i] - x[i];
        }
        Ok(())
    })?;
    Ok(acc.finish(eta, MomentSource::McSde))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryGap {
    pub index: Vec<usize>,
    pub a: f64,
    pub b: f64,
    pub gap: f64,
    /// Combined standard error `√(se_a² + se_b²)`.
    pub se: f64,
    pub gap_over_eta4: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentComparisonReport {
    pub eta: f64,
    pub tolerance: f64,
    pub first: Vec<EntryGap>,
    pub second: Vec<EntryGap>,
    pub third: Vec<EntryGap>,
    pub pass: bool,
}

impl MomentComparisonReport {
    pub fn entries(&self) -> impl Iterator<Item = &EntryGap> {
        self.first.iter().chain(&self.second).chain(&self.third)
    }

    /// Largest `gap/η⁴` over all entries.
    pub fn max_gap_over_eta4(&self) -> f64 {
        self.entries().map(|e| e.gap_over_eta4).fold(0.0, f64::max)
    }
}

/// Entrywise gaps; an entry passes when `gap ≤ max(4·SE, tolerance·η⁴)`.
pub fn compare_moments(a: &OneStepMoments, b: &OneStepMoments, tolerance: f64) -> Result<MomentComparisonReport> {
    check_dim(a.dim, b.dim)?;
    if (a.eta - b.eta).abs() > 1e-12 * a.eta.abs().max(b.eta.abs()) {
        return Err(invalid(
            "eta",
            format!("moments at different eta: {} vs {}", a.eta, b.eta),
        ));
    }
    let eta4 = a.eta.powi(4);
    let gaps = |xs: &[MomentEntry], ys: &[MomentEntry]| -> Result<Vec<EntryGap>> {
        if xs.len() != ys.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                got: ys.len(),
            });
        }
        xs.iter()
            .zip(ys)
            .map(|(x, y)| {
                if x.index != y.index {
                    return Err(invalid("moments", "entry index sets differ"));
                }
                let gap = (x.value - y.value).abs();
                let se = x.se.hypot(y.se);
                Ok(EntryGap {
                    index: x.index.clone(),
                    a: x.value,
                    b: y.value,
                    gap,
                    se,
                    gap_over_eta4: gap / eta4,
                    pass: gap <= (4.0 * se).max(tolerance * eta4),
                })
            })
            .collect()
    };
    let first = gaps(&a.first, &b.first)?;
    let second = gaps(&a.second, &b.second)?;
    let third = gaps(&a.third, &b.third)?;
    let pass = first.iter().chain(&second).chain(&third).all(|e| e.pass);
    Ok(MomentComparisonReport {
        eta: a.eta,
        tolerance,
        first,
        second,
        third,
        pass,
    })
}

/// Default `O(η⁴)` tolerance: 10× the largest `gap/η⁴` seen at the smallest η.
pub fn default_tolerance(smallest_eta_report: &MomentComparisonReport) -> f64 {
    10.0 * smallest_eta_report.max_gap_over_eta4()
}

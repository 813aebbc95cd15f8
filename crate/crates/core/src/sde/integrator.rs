use nalgebra::DVector;
use rayon::prelude::*;

use super::{SdeState, SdeSystem};
use crate::error::{check_dim, invalid, Error, Result};
use crate::record::{Path, StateView, TestFunctionSet, TrajectoryRecord};
use crate::streams::{path_rng, NormalStream, RngNormals};

/// Uniform grid `t_n = t0 + n·dt` covering `[t0, t_end]` with every
/// checkpoint on a grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: u64,
    pub checkpoint_steps: Vec<u64>,
}

const GRID_TOL: f64 = 1e-6;

fn grid_index(t0: f64, dt: f64, t: f64, what: &str) -> Result<u64> {
    let n = ((t - t0) / dt).round();
    if n < 0.0 || (t0 + n * dt - t).abs() > GRID_TOL * dt {
        return Err(Error::GridMismatch(format!(
            "{what} {t} is not on the grid t0 = {t0}, dt = {dt}"
        )));
    }
    Ok(n as u64)
}

impl EmGrid {
    pub fn new(t0: f64, t_end: f64, dt: f64, checkpoint_times: &[f64]) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("must be > 0, got {dt}")));
        }
        if !(t_end >= t0) {
            return Err(invalid("t_end", format!("must be >= t0 = {t0}, got {t_end}")));
        }
        let n_steps = grid_index(t0, dt, t_end, "t_end")?;
        let mut checkpoint_steps = Vec::with_capacity(checkpoint_times.len());
        for &c in checkpoint_times {
            if c < t0 - GRID_TOL * dt || c > t_end + GRID_TOL * dt {
                return Err(invalid("checkpoints", format!("{c} outside [{t0}, {t_end}]")));
            }
            let n = grid_index(t0, dt, c, "checkpoint")?;
            if checkpoint_steps.last().is_some_and(|&p| p >= n) {
                return Err(invalid("checkpoints", "must be strictly increasing"));
            }
            checkpoint_steps.push(n);
        }
        Ok(Self {
            t0,
            dt,
            n_steps,
            checkpoint_steps,
        })
    }

    pub fn time(&self, n: u64) -> f64 {
        self.t0 + n as f64 * self.dt
    }
}

/// Advances `x` by `n_steps` Euler–Maruyama steps from `t0`, calling
/// `visit(n, x)` before step `n` and once at the end.
fn integrate<S, F>(
    system: &SdeSystem,
    x: &mut DVector<f64>,
    t0: f64,
    dt: f64,
    n_steps: u64,
    noise: &mut S,
    mut visit: F,
) -> Result<()>
where
    S: NormalStream,
    F: FnMut(u64, &DVector<f64>) -> Result<()>,
{
    let sqrt_dt = dt.sqrt();
    let mut w = vec![0.0; system.noise_dim()];
    for n in 0..n_steps {
        visit(n, x)?;
        let t = t0 + n as f64 * dt;
        let (b, s) = system.coefficients(x.as_slice(), t)?;
        noise.fill_standard_normal(&mut w);
        x.axpy(dt, &b, 1.0);
        let rows = s.block.nrows();
        for r in 0..rows {
            let mut acc = 0.0;
            for (j, wj) in w.iter().enumerate() {
                acc += s.block[(r, j)] * wj;
            }
            x[s.row_offset + r] += acc * sqrt_dt;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTime {
                time: t0 + (n + 1) as f64 * dt,
            });
        }
    }
    visit(n_steps, x)
}

fn view<'a>(system: &SdeSystem, x: &'a [f64]) -> StateView<'a> {
    let d = system.param_dim();
    let (m, u) = system.layout();
    StateView {
        theta: &x[..d],
        m: m.map(|o| &x[o..o + d]),
        u: u.map(|o| &x[o..o + d]),
    }
}

/// One Euler–Maruyama path from `init` to `t_end`, recording `fns` at
/// `checkpoint_times` (each must lie on the grid `init.t + n·dt`).
pub fn euler_maruyama<S: NormalStream>(
    system: &SdeSystem,
    init: &SdeState,
    t_end: f64,
    dt: f64,
    fns: &TestFunctionSet,
    checkpoint_times: &[f64],
    noise: &mut S,
) -> Result<Path> {
    check_dim(system.state_dim(), init.x.len())?;
    let grid = EmGrid::new(init.t, t_end, dt, checkpoint_times)?;
    let mut path = Path {
        times: Vec::with_capacity(checkpoint_times.len()),
        indices: Vec::with_capacity(checkpoint_times.len()),
        values: Vec::with_capacity(checkpoint_times.len()),
    };
    let mut next = 0;
    let mut x = init.x.clone();
    integrate(system, &mut x, grid.t0, dt, grid.n_steps, noise, |n, x| {
        if next < grid.checkpoint_steps.len() && grid.checkpoint_steps[next] == n {
            path.values.push(fns.evaluate(&view(system, x.as_slice()))?);
            path.times.push(checkpoint_times[next]);
            path.indices.push(n);
            next += 1;
        }
        Ok(())
    })?;
    Ok(path)
}

/// State after `n_steps` steps of size `dt` from `init`.
pub fn em_endpoint<S: NormalStream>(
    system: &SdeSystem,
    init: &SdeState,
    n_steps: u64,
    dt: f64,
    noise: &mut S,
) -> Result<DVector<f64>> {
    check_dim(system.state_dim(), init.x.len())?;
    if !(dt > 0.0) {
        return Err(invalid("dt", format!("must be > 0, got {dt}")));
    }
    let mut x = init.x.clone();
    integrate(system, &mut x, init.t, dt, n_steps, noise, |_, _| Ok(()))?;
    Ok(x)
}

/// One path per seed with noise `path_rng(cell_seed, seed)`, merged in seed order.
#[allow(clippy::too_many_arguments)]
pub fn run_sde(
    system: &SdeSystem,
    init: &SdeState,
    t_end: f64,
    dt: f64,
    fns: &TestFunctionSet,
    checkpoint_times: &[f64],
    cell_seed: u64,
    seeds: &[u64],
) -> Result<TrajectoryRecord> {
    EmGrid::new(init.t, t_end, dt, checkpoint_times)?;
    let paths = seeds
        .par_iter()
        .map(|&s| {
            let mut noise = RngNormals(path_rng(cell_seed, s));
            euler_maruyama(system, init, t_end, dt, fns, checkpoint_times, &mut noise)
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryRecord::from_paths(fns.names(), seeds.to_vec(), paths)
}

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::record::TrajectoryRecord;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointGap {
    pub t: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a − mean_b`.
    pub gap: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionGap {
    pub name: String,
    pub max_gap: f64,
    pub argmax_t: f64,
    /// SE of the gap at the argmax checkpoint.
    pub max_gap_se: f64,
    pub checkpoints: Vec<CheckpointGap>,
}

/// Per-function `max_t |Ê g(a) − Ê g(b)|` with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakErrorReport {
    pub eta: f64,
    /// Whether the two records share noise seed by seed (paired SEs).
    pub paired: bool,
    pub functions: Vec<FunctionGap>,
}

impl WeakErrorReport {
    pub fn function(&self, name: &str) -> Option<&FunctionGap> {
        self.functions.iter().find(|f| f.name == name)
    }
}

const TIME_TOL: f64 = 1e-9;

/// Compares two records checkpoint by checkpoint. With `paired = true` the
/// records must share seeds and SEs come from per-seed differences;
/// otherwise the two SEs are combined in quadrature.
pub fn weak_error(a: &TrajectoryRecord, b: &TrajectoryRecord, eta: f64, paired: bool) -> Result<WeakErrorReport> {
    if a.function_names != b.function_names {
        return Err(invalid("records", "test function lists differ"));
    }
    if a.checkpoints.len() != b.checkpoints.len() {
        return Err(Error::GridMismatch(format!(
            "{} vs {} checkpoints",
            a.checkpoints.len(),
            b.checkpoints.len()
        )));
    }
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        if (x.t - y.t).abs() > TIME_TOL * x.t.abs().max(1.0) {
            return Err(Error::GridMismatch(format!(
                "checkpoint times {} and {} differ",
                x.t, y.t
            )));
        }
    }
    if paired && a.seeds != b.seeds {
        return Err(invalid("records", "paired comparison needs identical seed lists"));
    }
    let functions = a
        .function_names
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let checkpoints: Vec<CheckpointGap> = (0..a.checkpoints.len())
                .map(|c| {
                    let (sa, sb) = (a.samples(f, c), b.samples(f, c));
                    let (mean_a, se_a) = stats::mean_se(sa);
                    let (mean_b, se_b) = stats::mean_se(sb);
                    let se = if paired {
                        stats::paired_diff(sa, sb).1
                    } else {
                        se_a.hypot(se_b)
                    };
                    CheckpointGap {
                        t: a.checkpoints[c].t,
                        mean_a,
                        mean_b,
                        gap: mean_a - mean_b,
                        se,
                    }
                })
                .collect();
            let best = checkpoints
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |acc, (i, g)| match acc {
                    Some((_, m)) if m >= g.gap.abs() => acc,
                    _ => Some((i, g.gap.abs())),
                });
            let (max_gap, argmax_t, max_gap_se) = match best {
                Some((i, m)) => (m, checkpoints[i].t, checkpoints[i].se),
                None => (0.0, f64::NAN, 0.0),
            };
            FunctionGap {
                name: name.clone(),
                max_gap,
                argmax_t,
                max_gap_se,
                checkpoints,
            }
        })
        .collect();
    Ok(WeakErrorReport { eta, paired, functions })
}

/// Max gap per function only, for bootstrap loops.
pub(crate) fn max_gaps(
    a: &TrajectoryRecord,
    b: &TrajectoryRecord,
    positions_a: &[usize],
    positions_b: &[usize],
) -> Vec<f64> {
    (0..a.function_names.len())
        .map(|f| {
            (0..a.checkpoints.len())
                .map(|c| {
                    let sa = a.samples(f, c);
                    let sb = b.samples(f, c);
                    let ma = positions_a.iter().map(|&p| sa[p]).sum::<f64>() / positions_a.len() as f64;
                    let mb = positions_b.iter().map(|&p| sb[p]).sum::<f64>() / positions_b.len() as f64;
                    (ma - mb).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Path;

    fn record(values: &[[f64; 2]], times: [f64; 2]) -> TrajectoryRecord {
        let paths = values
            .iter()
            .map(|v| Path {
                times: times.to_vec(),
                indices: vec![0, 1],
                values: vec![vec![v[0]], vec![v[1]]],
            })
            .collect();
        TrajectoryRecord::from_paths(vec!["g".into()], (0..values.len() as u64).collect(), paths).unwrap()
    }

    #[test]
    fn self_comparison_is_zero() {
        let r = record(&[[1.0, 2.0], [3.0, 5.0]], [0.0, 1.0]);
        let w = weak_error(&r, &r, 0.1, true).unwrap();
        assert_eq!(w.functions[0].max_gap, 0.0);
        assert!(w.functions[0].checkpoints.iter().all(|c| c.se == 0.0));
    }

    #[test]
    fn swapping_flips_signs_only() {
        let a = record(&[[1.0, 2.0], [3.0, 5.0]], [0.0, 1.0]);
        let b = record(&[[0.0, 2.5], [1.0, 4.0]], [0.0, 1.0]);
        let ab = weak_error(&a, &b, 0.1, false).unwrap();
        let ba = weak_error(&b, &a, 0.1, false).unwrap();
        assert_eq!(ab.functions[0].max_gap, ba.functions[0].max_gap);
        assert_eq!(ab.functions[0].max_gap, 1.5);
        for (x, y) in ab.functions[0].checkpoints.iter().zip(&ba.functions[0].checkpoints) {
            assert_eq!(x.gap, -y.gap);
        }
        assert!(ab.functions[0]
            .checkpoints
            .iter()
            .all(|c| c.gap.abs() <= ab.functions[0].max_gap));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = record(&[[1.0, 2.0]], [0.0, 1.0]);
        let b = record(&[[1.0, 2.0]], [0.0, 1.1]);
        assert!(matches!(weak_error(&a, &b, 0.1, false), Err(Error::GridMismatch(_))));
    }
}

//! Experiments comparing discrete runs with SDE runs, across learning rates,
//! SVAG factors and batch sizes.

pub(crate) mod order;
mod scaling;
pub(crate) mod svag;
mod warmup;
mod weak;

use serde::Serialize;

pub use order::{order_from_records, order_sweep, FunctionOrder, OrderReport, OrderSweepConfig};
pub use scaling::{validate_scaling, KappaReport, NoiseModel, ScalingExperiment, ScalingReport, ScalingRow};
pub use svag::{svag_cell_seed, svag_sweep, Discrepancy, SvagFunctionReport, SvagReport, SvagSweepConfig};
pub use warmup::{linear_warmup_check, ClosedFormReport, WarmupCoordinate};
pub use weak::{weak_error, CheckpointGap, FunctionGap, WeakErrorReport};

/// Outcome of a statistical check. `Inconclusive` means the signal was below
/// twice its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
    /// Nothing to measure (e.g. every gap is exactly zero).
    Undefined,
}

impl Status {
    /// Combines statuses: any failure fails; otherwise any inconclusive
    /// result is inconclusive; undefined entries are ignored.
    pub fn combine(items: impl IntoIterator<Item = Status>) -> Status {
        let mut out = Status::Undefined;
        for s in items {
            out = match (out, s) {
                (Status::Fail, _) | (_, Status::Fail) => Status::Fail,
                (Status::Inconclusive, _) | (_, Status::Inconclusive) => Status::Inconclusive,
                (Status::Pass, _) | (_, Status::Pass) => Status::Pass,
                _ => Status::Undefined,
            };
        }
        out
    }
}

/// Default number of seeds per cell.
pub const DEFAULT_SEEDS: usize = 200;
/// Default Euler–Maruyama substeps per discrete step (`dt = η²/20`).
pub const DEFAULT_SUBSTEPS: u32 = 20;
/// Default bootstrap resamples for slope confidence intervals.
pub const DEFAULT_BOOTSTRAP: usize = 200;

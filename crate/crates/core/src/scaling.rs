//! Batch-size scaling rules.
//!
//! Square-root rule for a batch multiplier κ: `η' = η√κ`, each decay
//! `β' = 1 − κ(1−β)`, `ε' = ε/√κ`. Linear variants scale `η` (and optionally
//! `1−β₁`, `1−β₂`) by κ and keep ε. The batch-κB run takes `⌊k/κ⌋` steps where
//! the base run takes `k`.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::optimizers::{Algorithm, HyperParams};

/// Which optional fields a rule touches; `η` is always scaled. `beta` is
/// RMSprop's single decay, `beta1`/`beta2` are Adam's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ScaleFlags {
    pub epsilon: bool,
    pub beta: bool,
    pub beta1: bool,
    pub beta2: bool,
}

impl ScaleFlags {
    /// Linear-rule ablations (a)–(d): η; η,1−β₁; η,1−β₂; η,1−β₁,1−β₂.
    pub fn linear_variant(tag: char) -> Result<Self> {
        let (beta1, beta2) = match tag {
            'a' => (false, false),
            'b' => (true, false),
            'c' => (false, true),
            'd' => (true, true),
            _ => return Err(invalid("variant", format!("unknown linear variant `{tag}`"))),
        };
        Ok(Self {
            epsilon: false,
            beta: false,
            beta1,
            beta2,
        })
    }

    /// Partial square-root ablations (a)–(e): η; η,ε; η,ε,β₁; η,ε,β₂; all.
    pub fn partial_sqrt_variant(tag: char) -> Result<Self> {
        let (epsilon, beta1, beta2) = match tag {
            'a' => (false, false, false),
            'b' => (true, false, false),
            'c' => (true, true, false),
            'd' => (true, false, true),
            'e' => (true, true, true),
            _ => {
                return Err(invalid(
                    "variant",
                    format!("unknown partial square-root variant `{tag}`"),
                ))
            }
        };
        Ok(Self {
            epsilon,
            beta: false,
            beta1,
            beta2,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ScalingRule {
    SquareRootRmsprop,
    SquareRootAdam,
    /// `η' = κη` for SGD.
    LinearSgd,
    LinearAdamVariant(ScaleFlags),
    PartialSquareRoot(ScaleFlags),
}

impl ScalingRule {
    /// Whether the rule keeps the SDE constants σ₀, ε₀, c₁, c₂ fixed.
    pub fn preserves_sde(&self) -> bool {
        match self {
            Self::SquareRootRmsprop | Self::SquareRootAdam => true,
            Self::PartialSquareRoot(f) => f.epsilon && ((f.beta1 && f.beta2) || f.beta),
            _ => false,
        }
    }
}

fn scaled_decay(name: &'static str, beta: f64, factor: f64) -> Result<f64> {
    let out = 1.0 - factor * (1.0 - beta);
    if !(0.0..1.0).contains(&out) {
        return Err(invalid(
            name,
            format!("scaled decay leaves [0,1): 1 - {factor}(1 - {beta}) = {out}"),
        ));
    }
    Ok(out)
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(invalid("kappa", format!("must be > 0, got {kappa}")))
    }
}

pub fn scale_rmsprop(hp: &HyperParams, kappa: f64) -> Result<HyperParams> {
    check_kappa(kappa)?;
    let r = kappa.sqrt();
    Ok(HyperParams {
        eta: hp.eta * r,
        beta: scaled_decay("beta", hp.beta, kappa)?,
        epsilon: hp.epsilon / r,
        ..*hp
    })
}

pub fn scale_adam(hp: &HyperParams, kappa: f64) -> Result<HyperParams> {
    check_kappa(kappa)?;
    let r = kappa.sqrt();
    Ok(HyperParams {
        eta: hp.eta * r,
        beta1: scaled_decay("beta1", hp.beta1, kappa)?,
        beta2: scaled_decay("beta2", hp.beta2, kappa)?,
        epsilon: hp.epsilon / r,
        ..*hp
    })
}

/// `η' = κη`; flagged `1−β` fields scaled by κ; ε unchanged.
pub fn scale_linear_variant(hp: &HyperParams, kappa: f64, flags: ScaleFlags) -> Result<HyperParams> {
    check_kappa(kappa)?;
    let mut out = *hp;
    out.eta = hp.eta * kappa;
    if flags.beta1 {
        out.beta1 = scaled_decay("beta1", hp.beta1, kappa)?;
    }
    if flags.beta2 {
        out.beta2 = scaled_decay("beta2", hp.beta2, kappa)?;
    }
    if flags.beta {
        out.beta = scaled_decay("beta", hp.beta, kappa)?;
    }
    Ok(out)
}

/// Square-root rule restricted to the flagged fields.
pub fn scale_partial_sqrt(hp: &HyperParams, kappa: f64, flags: ScaleFlags) -> Result<HyperParams> {
    check_kappa(kappa)?;
    let r = kappa.sqrt();
    let mut out = *hp;
    out.eta = hp.eta * r;
    if flags.epsilon {
        out.epsilon = hp.epsilon / r;
    }
    if flags.beta1 {
        out.beta1 = scaled_decay("beta1", hp.beta1, kappa)?;
    }
    if flags.beta2 {
        out.beta2 = scaled_decay("beta2", hp.beta2, kappa)?;
    }
    if flags.beta {
        out.beta = scaled_decay("beta", hp.beta, kappa)?;
    }
    Ok(out)
}

pub fn apply_rule(rule: ScalingRule, hp: &HyperParams, kappa: f64) -> Result<HyperParams> {
    match rule {
        ScalingRule::SquareRootRmsprop => scale_rmsprop(hp, kappa),
        ScalingRule::SquareRootAdam => scale_adam(hp, kappa),
        ScalingRule::LinearSgd => scale_linear_variant(hp, kappa, ScaleFlags::default()),
        ScalingRule::LinearAdamVariant(f) => scale_linear_variant(hp, kappa, f),
        ScalingRule::PartialSquareRoot(f) => scale_partial_sqrt(hp, kappa, f),
    }
}

/// A validated base/scaled hyperparameter pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPlan {
    pub kappa: f64,
    pub rule: ScalingRule,
    pub base: HyperParams,
    pub scaled: HyperParams,
}

impl ScalingPlan {
    /// Fails eagerly when the scaled hyperparameters are out of range.
    pub fn new(rule: ScalingRule, base: HyperParams, kappa: f64) -> Result<Self> {
        base.validate()?;
        let scaled = apply_rule(rule, &base, kappa)?;
        scaled.validate()?;
        Ok(Self {
            kappa,
            rule,
            base,
            scaled,
        })
    }

    /// `k ↦ ⌊k/κ⌋`.
    pub fn step_map(&self, k: u64) -> u64 {
        step_map(k, self.kappa)
    }

    /// Batch size of the scaled run; `κB` must be an integer.
    pub fn scaled_batch(&self, base_batch: usize) -> Result<usize> {
        let b = self.kappa * base_batch as f64;
        if (b - b.round()).abs() > 1e-9 || b < 1.0 {
            return Err(invalid("kappa", format!("κB = {b} is not a positive integer")));
        }
        Ok(b.round() as usize)
    }
}

fn step_map(k: u64, kappa: f64) -> u64 {
    (k as f64 / kappa + 1e-9).floor() as u64
}

/// A base checkpoint, its partner at batch κB, and the shared continuous time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignedPair {
    pub base_k: u64,
    pub scaled_k: u64,
    pub t: f64,
}

/// Pairs `(k, ⌊k/κ⌋)` annotated with `t = kη²` (`kη` for SGD).
pub fn align_checkpoints(base_steps: &[u64], kappa: f64, base_eta: f64, algo: Algorithm) -> Result<Vec<AlignedPair>> {
    if !(kappa >= 1.0) {
        return Err(invalid("kappa", format!("must be >= 1, got {kappa}")));
    }
    let dt = algo.time_per_step(base_eta);
    Ok(base_steps
        .iter()
        .map(|&k| AlignedPair {
            base_k: k,
            scaled_k: step_map(k, kappa),
            t: k as f64 * dt,
        })
        .collect())
}

/// Errors unless every base checkpoint is an exact multiple of κ.
pub fn check_exact_alignment(pairs: &[AlignedPair], kappa: f64) -> Result<()> {
    for p in pairs {
        if ((p.scaled_k as f64) * kappa - p.base_k as f64).abs() > 1e-9 {
            return Err(Error::GridMismatch(format!(
                "base step {} is not a multiple of kappa = {kappa}",
                p.base_k
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::SdeConstants;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn rmsprop_examples() {
        let hp = HyperParams::rmsprop(1e-3, 0.999, 1e-8);
        let s = scale_rmsprop(&hp, 4.0).unwrap();
        assert!(close(s.eta, 2e-3) && close(s.beta, 0.996) && close(s.epsilon, 5e-9));
        assert_eq!(scale_rmsprop(&hp, 1.0).unwrap(), hp);
        assert!(scale_rmsprop(&hp, 2000.0).is_err());
    }

    #[test]
    fn adam_examples() {
        let hp = HyperParams::adam(1e-3, 0.999, 0.999, 1e-8);
        let s = scale_adam(&hp, 16.0).unwrap();
        assert!(close(s.eta, 4e-3) && close(s.beta1, 0.984) && close(s.beta2, 0.984) && close(s.epsilon, 2.5e-9));
        assert_eq!(scale_adam(&hp, 1.0).unwrap(), hp);
    }

    #[test]
    fn linear_examples() {
        let hp = HyperParams::adam(1e-3, 0.999, 0.999, 1e-8);
        let a = scale_linear_variant(&hp, 4.0, ScaleFlags::linear_variant('a').unwrap()).unwrap();
        assert!(close(a.eta, 4e-3) && a.beta1 == 0.999 && a.beta2 == 0.999 && a.epsilon == 1e-8);
        let d = scale_linear_variant(&hp, 4.0, ScaleFlags::linear_variant('d').unwrap()).unwrap();
        assert!(close(d.beta1, 0.996) && close(d.beta2, 0.996) && d.epsilon == 1e-8);
        assert_eq!(
            scale_linear_variant(&hp, 1.0, ScaleFlags::linear_variant('d').unwrap()).unwrap(),
            hp
        );
    }

    #[test]
    fn partial_sqrt_full_flags_equal_square_root_rule() {
        let hp = HyperParams::adam(1e-2, 0.9, 0.99, 1e-6);
        let e = scale_partial_sqrt(&hp, 4.0, ScaleFlags::partial_sqrt_variant('e').unwrap()).unwrap();
        let s = scale_adam(&hp, 4.0).unwrap();
        assert!(
            close(e.eta, s.eta) && close(e.beta1, s.beta1) && close(e.beta2, s.beta2) && close(e.epsilon, s.epsilon)
        );
    }

    #[test]
    fn alignment_examples() {
        let p = align_checkpoints(&[100], 4.0, 0.1, Algorithm::Adam).unwrap();
        assert_eq!(p[0].scaled_k, 25);
        assert!(close(p[0].t, 100.0 * 0.01));
        let id = align_checkpoints(&[0, 3, 7], 1.0, 0.1, Algorithm::Rmsprop).unwrap();
        assert!(id.iter().all(|p| p.base_k == p.scaled_k));
        assert!(check_exact_alignment(&align_checkpoints(&[6], 4.0, 0.1, Algorithm::Adam).unwrap(), 4.0).is_err());
        let sgd = align_checkpoints(&[10], 2.0, 0.1, Algorithm::Sgd).unwrap();
        assert!(close(sgd[0].t, 1.0));
    }

    #[test]
    fn sqrt_rules_preserve_sde_constants() {
        let base = HyperParams::adam(0.01, 0.99, 0.999, 1e-4);
        let sigma = 3.0;
        let k0 = SdeConstants::from_adam(&base, sigma);
        for kappa in [1.0, 2.0, 4.0, 16.0] {
            let s = scale_adam(&base, kappa).unwrap();
            let k = SdeConstants::from_adam(&s, sigma / kappa.sqrt());
            assert!(close(k.sigma0, k0.sigma0) && close(k.epsilon0, k0.epsilon0));
            assert!((k.c1 - k0.c1).abs() < 1e-12 * k0.c1 && (k.c2 - k0.c2).abs() < 1e-12 * k0.c2);
            let r = scale_rmsprop(&HyperParams::rmsprop(0.01, 0.99, 1e-4), kappa).unwrap();
            let kr = SdeConstants::from_rmsprop(&r, sigma / kappa.sqrt());
            let kr0 = SdeConstants::from_rmsprop(&HyperParams::rmsprop(0.01, 0.99, 1e-4), sigma);
            assert!(close(kr.sigma0, kr0.sigma0) && (kr.c2 - kr0.c2).abs() < 1e-12 * kr0.c2);
        }
        for kappa in [2.0, 4.0, 16.0] {
            let l = scale_linear_variant(&base, kappa, ScaleFlags::linear_variant('d').unwrap()).unwrap();
            let k = SdeConstants::from_adam(&l, sigma / kappa.sqrt());
            assert!((k.sigma0 - k0.sigma0).abs() > 0.0);
        }
    }

    #[test]
    fn plans_fail_fast() {
        assert!(ScalingPlan::new(
            ScalingRule::SquareRootRmsprop,
            HyperParams::rmsprop(1e-3, 0.999, 0.0),
            2000.0
        )
        .is_err());
        let p = ScalingPlan::new(
            ScalingRule::SquareRootAdam,
            HyperParams::adam(1e-3, 0.9, 0.99, 0.0),
            4.0,
        )
        .unwrap();
        assert_eq!(p.step_map(100), 25);
        assert_eq!(p.scaled_batch(8).unwrap(), 32);
    }

    proptest! {
        #[test]
        fn adam_rule_composes(a in 1.0f64..4.0, b in 1.0f64..4.0) {
            let hp = HyperParams::adam(1e-3, 0.999, 0.9999, 1e-8);
            let two = scale_adam(&scale_adam(&hp, a).unwrap(), b).unwrap();
            let one = scale_adam(&hp, a * b).unwrap();
            prop_assert!(close(two.eta, one.eta));
            prop_assert!((two.beta1 - one.beta1).abs() < 1e-12);
            prop_assert!((two.beta2 - one.beta2).abs() < 1e-12);
            prop_assert!(close(two.epsilon, one.epsilon));
        }
    }
}

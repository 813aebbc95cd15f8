//! Noisy gradient oracles with a scale parameter: `g = ∇f(θ) + σ z` with
//! `E z = 0` and `Cov z = Σ(θ)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{check_dim, invalid, Error, Result};
use crate::problems::{CovarianceSpec, Problem};
use crate::stats;

/// Noise model of an oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    /// `z = Σ^{1/2} w`, `w` standard normal.
    Gaussian { cov: CovarianceSpec, sigma: f64 },
    /// `z = Σ^{1/2} w` with i.i.d. standardised Bernoulli(p) entries in `w`.
    /// Skewed whenever `p ≠ ½`; used to exercise the low-skewness behaviour.
    CenteredBernoulli { cov: CovarianceSpec, p: f64, sigma: f64 },
    /// Mean of `batch_size` per-datum gradients.
    Minibatch { batch_size: usize, with_replacement: bool },
    /// `ĝ = r₁ g₁ + r₂ g₂` over two independent inner draws.
    SvagWrapped { inner: Box<NoiseKind>, ell: f64 },
}

/// A noisy gradient oracle. Immutable and cheap to clone.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientOracle {
    problem: Arc<Problem>,
    noise: NoiseKind,
}

impl GradientOracle {
    pub fn new(problem: Arc<Problem>, noise: NoiseKind) -> Result<Self> {
        validate_noise(&problem, &noise)?;
        Ok(Self { problem, noise })
    }

    pub fn gaussian(problem: Arc<Problem>, cov: CovarianceSpec, sigma: f64) -> Result<Self> {
        Self::new(problem, NoiseKind::Gaussian { cov, sigma })
    }

    pub fn minibatch(problem: Arc<Problem>, batch_size: usize) -> Result<Self> {
        Self::new(
            problem,
            NoiseKind::Minibatch {
                batch_size,
                with_replacement: true,
            },
        )
    }

    pub fn problem(&self) -> &Arc<Problem> {
        &self.problem
    }

    pub fn noise(&self) -> &NoiseKind {
        &self.noise
    }

    /// Noise scale σ such that `g − ∇f = σ z` with `Cov z = Σ`.
    pub fn sigma_effective(&self) -> f64 {
        sigma_of(&self.noise)
    }

    /// The covariance `Σ(θ)` of the normalised noise `z`.
    pub fn covariance_spec(&self) -> CovarianceSpec {
        cov_of(&self.noise)
    }

    /// Draws one stochastic gradient.
    pub fn sample_gradient<R: Rng + ?Sized>(&self, theta: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        check_dim(self.problem.dim(), theta.len())?;
        let grad = self.problem.gradient_unchecked(theta);
        self.sample_with_gradient(&self.noise, theta, &grad, rng)
    }

    fn sample_with_gradient<R: Rng + ?Sized>(
        &self,
        noise: &NoiseKind,
        theta: &DVector<f64>,
        grad: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let d = grad.len();
        match noise {
            NoiseKind::Gaussian { cov, sigma } => {
                if *sigma == 0.0 {
                    return Ok(grad.clone());
                }
                let w = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let s = cov.sqrt(&self.problem, theta)?;
                Ok(grad + (s * w) * *sigma)
            }
            NoiseKind::CenteredBernoulli { cov, p, sigma } => {
                let scale = (p * (1.0 - p)).sqrt();
                let w = DVector::from_fn(d, |_, _| {
                    let b = if rng.random::<f64>() < *p { 1.0 } else { 0.0 };
                    (b - p) / scale
                });
                let s = cov.sqrt(&self.problem, theta)?;
                Ok(grad + (s * w) * *sigma)
            }
            NoiseKind::Minibatch {
                batch_size,
                with_replacement,
            } => {
                let n = self.problem.num_data().expect("validated finite-sum");
                let mut g = DVector::zeros(d);
                if *with_replacement {
                    for _ in 0..*batch_size {
                        let i = rng.random_range(0..n);
                        self.problem.add_datum_gradient(i, theta, 1.0, &mut g);
                    }
                } else {
                    let mut idx = index::sample(rng, n, *batch_size).into_vec();
                    idx.sort_unstable();
                    for i in idx {
                        self.problem.add_datum_gradient(i, theta, 1.0, &mut g);
                    }
                }
                Ok(g / *batch_size as f64)
            }
            NoiseKind::SvagWrapped { inner, ell } => {
                let (r1, r2) = svag_coefficients(*ell)?;
                let g1 = self.sample_with_gradient(inner, theta, grad, rng)?;
                let g2 = self.sample_with_gradient(inner, theta, grad, rng)?;
                Ok(g1 * r1 + g2 * r2)
            }
        }
    }

    /// Gaussian draw from caller-supplied standard normals `w`:
    /// `∇f(θ) + σ Σ^{1/2}(θ) w`. Used to couple discrete and continuous paths.
    pub fn gaussian_from_normals(&self, theta: &DVector<f64>, w: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.problem.dim(), theta.len())?;
        check_dim(self.problem.dim(), w.len())?;
        match &self.noise {
            NoiseKind::Gaussian { cov, sigma } => {
                let grad = self.problem.gradient_unchecked(theta);
                if *sigma == 0.0 {
                    return Ok(grad);
                }
                let s = cov.sqrt(&self.problem, theta)?;
                Ok(grad + (s * DVector::from_column_slice(w)) * *sigma)
            }
            _ => Err(Error::Unsupported(
                "normal-driven sampling requires a Gaussian oracle".into(),
            )),
        }
    }
}

fn validate_noise(problem: &Problem, noise: &NoiseKind) -> Result<()> {
    match noise {
        NoiseKind::Gaussian { cov, sigma } => {
            if !(*sigma >= 0.0 && sigma.is_finite()) {
                return Err(invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
            }
            cov.validate_for(problem)
        }
        NoiseKind::CenteredBernoulli { cov, p, sigma } => {
            if !(*p > 0.0 && *p < 1.0) {
                return Err(invalid("p", format!("must lie in (0,1), got {p}")));
            }
            if !(*sigma >= 0.0 && sigma.is_finite()) {
                return Err(invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
            }
            cov.validate_for(problem)
        }
        NoiseKind::Minibatch {
            batch_size,
            with_replacement,
        } => {
            let n = problem
                .num_data()
                .ok_or_else(|| Error::Unsupported("minibatch noise requires a finite-sum problem".into()))?;
            if *batch_size == 0 {
                return Err(invalid("batch_size", "must be positive"));
            }
            if !with_replacement && *batch_size > n {
                return Err(invalid(
                    "batch_size",
                    format!("{batch_size} exceeds {n} data points without replacement"),
                ));
            }
            Ok(())
        }
        NoiseKind::SvagWrapped { inner, ell } => {
            svag_coefficients(*ell)?;
            validate_noise(problem, inner)
        }
    }
}

fn sigma_of(noise: &NoiseKind) -> f64 {
    match noise {
        NoiseKind::Gaussian { sigma, .. } | NoiseKind::CenteredBernoulli { sigma, .. } => *sigma,
        NoiseKind::Minibatch { batch_size, .. } => 1.0 / (*batch_size as f64).sqrt(),
        NoiseKind::SvagWrapped { inner, ell } => ell * sigma_of(inner),
    }
}

fn cov_of(noise: &NoiseKind) -> CovarianceSpec {
    match noise {
        NoiseKind::Gaussian { cov, .. } | NoiseKind::CenteredBernoulli { cov, .. } => cov.clone(),
        NoiseKind::Minibatch { .. } => CovarianceSpec::empirical(),
        NoiseKind::SvagWrapped { inner, .. } => cov_of(inner),
    }
}

/// `(r₁, r₂) = (½(1 − √(2ℓ²−1)), ½(1 + √(2ℓ²−1)))`.
pub fn svag_coefficients(ell: f64) -> Result<(f64, f64)> {
    if !(ell >= 1.0) || !ell.is_finite() {
        return Err(invalid("ell", format!("must be >= 1, got {ell}")));
    }
    let s = (2.0 * ell * ell - 1.0).sqrt();
    Ok((0.5 * (1.0 - s), 0.5 * (1.0 + s)))
}

/// Wraps `oracle` so that it samples `r₁ g₁ + r₂ g₂`; the result has noise
/// scale `ℓσ` and the same `Σ(θ)`.
pub fn apply_svag_operator(oracle: &GradientOracle, ell: f64) -> Result<GradientOracle> {
    svag_coefficients(ell)?;
    GradientOracle::new(
        oracle.problem.clone(),
        NoiseKind::SvagWrapped {
            inner: Box::new(oracle.noise.clone()),
            ell,
        },
    )
}

/// Empirical moments of the normalised noise `z = (g − ∇f) / σ`.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseMomentReport {
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Row-major `d × d` sample covariance.
    pub covariance: Vec<f64>,
    pub covariance_se: Vec<f64>,
    /// `E[z_i³]` per coordinate.
    pub third_diagonal: Vec<f64>,
    pub third_diagonal_se: Vec<f64>,
    /// Largest `|E[z_i z_j z_k]|` over the off-diagonal triples examined.
    pub third_offdiagonal_max: f64,
    /// Max absolute entry over all third-moment entries examined.
    pub third_moment_norm: f64,
    pub sample_count: usize,
}

impl NoiseMomentReport {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.covariance)
    }

    pub fn covariance_se_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.covariance_se)
    }
}

const JACKKNIFE_GROUPS: usize = 100;
const OFFDIAG_TRIPLES: usize = 20;

/// Off-diagonal index triples `(i ≤ j ≤ k, not all equal)` whose third moment
/// is tracked: all of them for `d ≤ 8`, otherwise a fixed random subset.
pub(crate) fn offdiagonal_triples(d: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let mut all = Vec::new();
    if d <= 8 {
        for i in 0..d {
            for j in i..d {
                for k in j..d {
                    if !(i == j && j == k) {
                        all.push((i, j, k));
                    }
                }
            }
        }
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while all.len() < OFFDIAG_TRIPLES {
        let mut t = [rng.random_range(0..d), rng.random_range(0..d), rng.random_range(0..d)];
        t.sort_unstable();
        let t = (t[0], t[1], t[2]);
        if !(t.0 == t.1 && t.1 == t.2) && !all.contains(&t) {
            all.push(t);
        }
    }
    all
}

/// Estimates the moments of `z` at `θ` from `samples` oracle draws.
pub fn estimate_noise_moments<R: Rng + ?Sized>(
    oracle: &GradientOracle,
    theta: &DVector<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<NoiseMomentReport> {
    if samples < 100 {
        return Err(invalid("samples", format!("need at least 100, got {samples}")));
    }
    let sigma = oracle.sigma_effective();
    if sigma == 0.0 {
        return Err(Error::UndefinedNoise("effective noise scale is 0".into()));
    }
    let d = oracle.problem.dim();
    check_dim(d, theta.len())?;
    let grad = oracle.problem.gradient_unchecked(theta);
    let triples = offdiagonal_triples(d, 0x7419_3eed);

    // Raw per-group sums: z_i, z_i z_j (i ≤ j).
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let width = d + pairs.len();
    let groups = JACKKNIFE_GROUPS.min(samples);
    let mut sums = vec![vec![0.0; width]; groups];
    let mut counts = vec![0usize; groups];
    let mut cubes = vec![Vec::with_capacity(samples); d];
    let mut off = vec![Vec::with_capacity(samples); triples.len()];

    for s in 0..samples {
        let g = oracle.sample_with_gradient(&oracle.noise, theta, &grad, rng)?;
        let z: Vec<f64> = (0..d).map(|i| (g[i] - grad[i]) / sigma).collect();
        let grp = s * groups / samples;
        counts[grp] += 1;
        let row = &mut sums[grp];
        for i in 0..d {
            row[i] += z[i];
            cubes[i].push(z[i] * z[i] * z[i]);
        }
        for (p, &(i, j)) in pairs.iter().enumerate() {
            row[d + p] += z[i] * z[j];
        }
        for (t, &(i, j, k)) in triples.iter().enumerate() {
            off[t].push(z[i] * z[j] * z[k]);
        }
    }

    let n = samples as f64;
    let (est, se) = stats::grouped_jackknife(&sums, &counts, |avg| {
        let mut out = avg[..d].to_vec();
        for (p, &(i, j)) in pairs.iter().enumerate() {
            // Unbiased sample covariance from raw averages.
            out.push((avg[d + p] - avg[i] * avg[j]) * n / (n - 1.0));
        }
        out
    });
    let mut covariance = vec![0.0; d * d];
    let mut covariance_se = vec![0.0; d * d];
    for (p, &(i, j)) in pairs.iter().enumerate() {
        for (a, b) in [(i, j), (j, i)] {
            covariance[a * d + b] = est[d + p];
            covariance_se[a * d + b] = se[d + p];
        }
    }
    let (third_diagonal, third_diagonal_se): (Vec<f64>, Vec<f64>) = cubes.iter().map(|c| stats::mean_se(c)).unzip();
    let third_offdiagonal_max = off.iter().map(|c| stats::mean(c).abs()).fold(0.0, f64::max);
    let third_moment_norm = third_diagonal
        .iter()
        .map(|x| x.abs())
        .fold(third_offdiagonal_max, f64::max);

    Ok(NoiseMomentReport {
        mean: est[..d].to_vec(),
        mean_se: se[..d].to_vec(),
        covariance,
        covariance_se,
        third_diagonal,
        third_diagonal_se,
        third_offdiagonal_max,
        third_moment_norm,
        sample_count: samples,
    })
}

/// `Ê‖σz‖² / ‖∇f(θ)‖²`. Returns `+∞` when the gradient vanishes but the noise
/// does not ("fully noise-dominated") and 0 when the oracle is noiseless.
pub fn noise_dominance_ratio<R: Rng + ?Sized>(
    oracle: &GradientOracle,
    theta: &DVector<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples < 100 {
        return Err(invalid("samples", format!("need at least 100, got {samples}")));
    }
    check_dim(oracle.problem.dim(), theta.len())?;
    let grad = oracle.problem.gradient_unchecked(theta);
    let gn = grad.norm_squared();
    let noise_sq = if oracle.sigma_effective() == 0.0 {
        0.0
    } else {
        let mut acc = Vec::with_capacity(samples);
        for _ in 0..samples {
            let g = oracle.sample_with_gradient(&oracle.noise, theta, &grad, rng)?;
            acc.push((g - &grad).norm_squared());
        }
        stats::mean(&acc)
    };
    match (gn == 0.0, noise_sq == 0.0) {
        (true, true) => Err(Error::UndefinedNoise("both the gradient and the noise vanish".into())),
        (true, false) => Ok(f64::INFINITY),
        _ => Ok(noise_sq / gn),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::path_rng;
    use nalgebra::{dmatrix, dvector};

    fn quad() -> Arc<Problem> {
        Arc::new(Problem::quadratic(dmatrix![1.0, 0.0; 0.0, 4.0], dvector![0.5, 0.0]).unwrap())
    }

    fn least_squares(n: usize, d: usize, seed: u64) -> Arc<Problem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        Arc::new(Problem::least_squares(x, y).unwrap())
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(svag_coefficients(1.0).unwrap(), (0.0, 1.0));
        let (r1, r2) = svag_coefficients(2.0).unwrap();
        assert!((r1 + 0.822876).abs() < 1e-6 && (r2 - 1.822876).abs() < 1e-6);
        assert!((r1 * r1 + r2 * r2 - 4.0).abs() < 1e-12);
        assert!(svag_coefficients(0.5).is_err());
        for ell in [1.0, 1.5, 2.0, 4.0, 8.0, 16.0, 64.0] {
            let (a, b) = svag_coefficients(ell).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
            assert!((a * a + b * b - ell * ell).abs() < 1e-12 * ell * ell);
        }
    }

    #[test]
    fn noiseless_and_full_batch_are_exact() {
        let p = quad();
        let theta = dvector![1.0, -1.0];
        let o = GradientOracle::gaussian(p.clone(), CovarianceSpec::isotropic(1.0).unwrap(), 0.0).unwrap();
        let mut rng = path_rng(1, 0);
        assert_eq!(
            o.sample_gradient(&theta, &mut rng).unwrap(),
            p.full_gradient(&theta).unwrap()
        );

        let ls = least_squares(10, 3, 2);
        let full = GradientOracle::new(
            ls.clone(),
            NoiseKind::Minibatch {
                batch_size: 10,
                with_replacement: false,
            },
        )
        .unwrap();
        let theta = dvector![0.2, 0.3, -0.4];
        assert_eq!(
            full.sample_gradient(&theta, &mut rng).unwrap(),
            ls.full_gradient(&theta).unwrap()
        );
    }

    #[test]
    fn minibatch_requires_finite_sum() {
        assert!(GradientOracle::minibatch(quad(), 4).is_err());
    }

    #[test]
    fn effective_scales() {
        let ls = least_squares(8, 2, 3);
        let mb = GradientOracle::minibatch(ls, 4).unwrap();
        assert_eq!(mb.sigma_effective(), 0.5);
        let w = apply_svag_operator(&mb, 3.0).unwrap();
        assert!((w.sigma_effective() - 1.5).abs() < 1e-15);
        assert!(w.covariance_spec().is_empirical());
    }

    #[test]
    fn replay_is_bit_identical() {
        let o = apply_svag_operator(
            &GradientOracle::gaussian(quad(), CovarianceSpec::isotropic(2.0).unwrap(), 3.0).unwrap(),
            2.0,
        )
        .unwrap();
        let theta = dvector![0.3, 0.1];
        let a: Vec<_> = {
            let mut r = path_rng(9, 4);
            (0..5).map(|_| o.sample_gradient(&theta, &mut r).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut r = path_rng(9, 4);
            (0..5).map(|_| o.sample_gradient(&theta, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn svag_preserves_mean_and_scales_covariance() {
        let sigma_mat = dmatrix![2.0, 0.5; 0.5, 1.0];
        let o = GradientOracle::gaussian(quad(), CovarianceSpec::constant(sigma_mat.clone()).unwrap(), 0.7).unwrap();
        let ell = 2.0;
        let w = apply_svag_operator(&o, ell).unwrap();
        let theta = dvector![0.4, -0.3];
        let mut rng = path_rng(11, 0);
        let rep = estimate_noise_moments(&w, &theta, 100_000, &mut rng).unwrap();
        // z is normalised by ℓσ, so Cov z = Σ and E z = 0.
        for i in 0..2 {
            assert!(rep.mean[i].abs() < 4.0 * rep.mean_se[i]);
            for j in 0..2 {
                let gap = (rep.covariance[i * 2 + j] - sigma_mat[(i, j)]).abs();
                assert!(gap < 4.0 * rep.covariance_se[i * 2 + j], "cov[{i}{j}] gap {gap}");
            }
        }
    }

    #[test]
    fn gaussian_third_moment_vanishes() {
        let o = GradientOracle::gaussian(quad(), CovarianceSpec::isotropic(1.0).unwrap(), 2.0).unwrap();
        let mut rng = path_rng(12, 0);
        let rep = estimate_noise_moments(&o, &dvector![0.0, 0.0], 50_000, &mut rng).unwrap();
        for i in 0..2 {
            assert!(rep.third_diagonal[i].abs() < 4.0 * rep.third_diagonal_se[i]);
        }
    }

    #[test]
    fn dominance_ratio_examples() {
        let p = Arc::new(Problem::linear(dvector![1.0]).unwrap());
        let iso = CovarianceSpec::isotropic(1.0).unwrap();
        let o = GradientOracle::gaussian(p.clone(), iso.clone(), 100.0).unwrap();
        let mut rng = path_rng(13, 0);
        let r = noise_dominance_ratio(&o, &dvector![0.0], 20_000, &mut rng).unwrap();
        assert!((r / 1e4 - 1.0).abs() < 0.2, "ratio {r}");

        let quiet = GradientOracle::gaussian(p, iso.clone(), 0.0).unwrap();
        assert_eq!(
            noise_dominance_ratio(&quiet, &dvector![0.0], 100, &mut rng).unwrap(),
            0.0
        );

        let flat = Arc::new(Problem::linear(dvector![0.0]).unwrap());
        let noisy = GradientOracle::gaussian(flat.clone(), iso.clone(), 1.0).unwrap();
        assert_eq!(
            noise_dominance_ratio(&noisy, &dvector![0.0], 100, &mut rng).unwrap(),
            f64::INFINITY
        );
        let dead = GradientOracle::gaussian(flat, iso, 0.0).unwrap();
        assert!(noise_dominance_ratio(&dead, &dvector![0.0], 100, &mut rng).is_err());
    }

    #[test]
    fn undefined_noise_is_rejected() {
        let o = GradientOracle::gaussian(quad(), CovarianceSpec::isotropic(1.0).unwrap(), 0.0).unwrap();
        let mut rng = path_rng(14, 0);
        assert!(matches!(
            estimate_noise_moments(&o, &dvector![0.0, 0.0], 100, &mut rng),
            Err(Error::UndefinedNoise(_))
        ));
    }

    #[test]
    fn triple_subset_is_fixed_for_large_dimensions() {
        assert_eq!(offdiagonal_triples(2, 0).len(), 2);
        let a = offdiagonal_triples(12, 5);
        assert_eq!(a.len(), 20);
        assert_eq!(a, offdiagonal_triples(12, 5));
    }
}

//! Small statistics toolkit: accurate sums, standard errors, grouped jackknife,
//! least-squares slopes and a seeded bootstrap.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance. `NaN` for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&dev) / (xs.len() - 1) as f64
}

/// `(mean, standard error of the mean)`. The SE is 0 for a single value.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (variance(xs) / xs.len() as f64).sqrt())
}

/// `(mean, SE)` of the paired difference `a − b`.
pub fn paired_diff(a: &[f64], b: &[f64]) -> (f64, f64) {
    debug_assert_eq!(a.len(), b.len());
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_se(&d)
}

/// Grouped (delete-a-group) jackknife.
///
/// `groups[g]` holds the per-group *sums* of some raw quantities and
/// `counts[g]` the number of samples in group `g`. `stat` maps averaged raw
/// quantities to a statistic vector. Returns `(full-sample statistic, SE)`.
pub fn grouped_jackknife<F>(groups: &[Vec<f64>], counts: &[usize], stat: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let g = groups.len();
    let width = groups.first().map_or(0, Vec::len);
    let n: usize = counts.iter().sum();
    let mut total = vec![0.0; width];
    for grp in groups {
        for (t, v) in total.iter_mut().zip(grp) {
            *t += v;
        }
    }
    let full = stat(&total.iter().map(|t| t / n as f64).collect::<Vec<_>>());
    if g < 2 {
        return (full.clone(), vec![f64::NAN; full.len()]);
    }
    let leave_out: Vec<Vec<f64>> = groups
        .iter()
        .zip(counts)
        .map(|(grp, &c)| {
            let avg: Vec<f64> = total.iter().zip(grp).map(|(t, v)| (t - v) / (n - c) as f64).collect();
            stat(&avg)
        })
        .collect();
    let k = full.len();
    let mut se = vec![0.0; k];
    for j in 0..k {
        let m = leave_out.iter().map(|s| s[j]).sum::<f64>() / g as f64;
        let ss: f64 = leave_out.iter().map(|s| (s[j] - m).powi(2)).sum();
        se[j] = ((g - 1) as f64 / g as f64 * ss).sqrt();
    }
    (full, se)
}

/// Ordinary least squares fit `y ≈ a + b x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    /// Classical standard error of the slope (NaN with two points).
    pub slope_se: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if x.len() > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    LinearFit {
        intercept,
        slope,
        slope_se,
    }
}

/// Indices of one bootstrap resample of `0..n`.
pub fn resample_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Empirical `q`-quantile (linear interpolation) of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Sample standard deviation, used for bootstrap standard errors.
pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn pairwise_sum_is_accurate() {
        let xs = vec![0.1; 1_000_000];
        assert!((pairwise_sum(&xs) - 100_000.0).abs() < 1e-9);
    }

    #[test]
    fn mean_se_of_known_data() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn jackknife_of_mean_matches_classical_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let groups: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
        let counts = vec![1; xs.len()];
        let (est, se) = grouped_jackknife(&groups, &counts, |a| vec![a[0]]);
        let (m, s) = mean_se(&xs);
        assert!((est[0] - m).abs() < 1e-12);
        assert!((se[0] - s).abs() < 1e-12);
    }

    #[test]
    fn ols_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.5 - 2.0 * v).collect();
        let fit = ols(&x, &y);
        assert!((fit.slope + 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.5).abs() < 1e-12);
        assert!(fit.slope_se < 1e-12);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 1.0], 0.25), 0.25);
    }
}

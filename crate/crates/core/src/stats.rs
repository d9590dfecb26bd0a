//! Monte Carlo estimates, two-sample Kolmogorov-Smirnov machinery and a
//! chi-square goodness-of-fit test for Poisson division counts.

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Monte Carlo mean with sample count, standard error and CI level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MCEstimate {
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
    pub ci_level: f64,
}

impl MCEstimate {
    pub fn from_samples(samples: &[f64], ci_level: f64) -> MCEstimate {
        let n = samples.len();
        assert!(n >= 1, "empty sample");
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = if n >= 2 {
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MCEstimate {
            n,
            mean,
            std_error,
            ci_level,
        }
    }

    pub fn exact(value: f64, ci_level: f64) -> MCEstimate {
        MCEstimate {
            n: 0,
            mean: value,
            std_error: 0.0,
            ci_level,
        }
    }

    /// Estimate of c * X for a constant c.
    pub fn scaled(&self, c: f64) -> MCEstimate {
        MCEstimate {
            n: self.n,
            mean: c * self.mean,
            std_error: c.abs() * self.std_error,
            ci_level: self.ci_level,
        }
    }

    pub fn half_width(&self) -> f64 {
        normal_quantile(0.5 + self.ci_level / 2.0) * self.std_error
    }

    pub fn ci(&self) -> (f64, f64) {
        let h = self.half_width();
        (self.mean - h, self.mean + h)
    }

    /// z-score of the difference against an independent estimate.
    pub fn z_against(&self, other: &MCEstimate) -> f64 {
        let denom = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        if denom == 0.0 {
            if self.mean == other.mean {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - other.mean) / denom
        }
    }

    pub fn ci_overlaps(&self, other: &MCEstimate) -> bool {
        let (a_lo, a_hi) = self.ci();
        let (b_lo, b_hi) = other.ci();
        a_lo <= b_hi && b_lo <= a_hi
    }
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Sorted sample of a scalar statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    values: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty sample".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(EmpiricalDistribution { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    /// Empirical CDF at x (right-continuous).
    pub fn cdf(&self, x: f64) -> f64 {
        let idx = self.values.partition_point(|v| *v <= x);
        idx as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov survival function Q(lambda) = 2 sum (-1)^{k-1} e^{-2 k^2 lambda^2}.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..101 {
        let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_p_value(d: f64, n1: usize, n2: usize) -> f64 {
    let ne = (n1 as f64 * n2 as f64) / (n1 as f64 + n2 as f64);
    let sq = ne.sqrt();
    kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d)
}

/// Exact sup-distance of the two empirical CDFs, with the asymptotic
/// Kolmogorov p-value. Ties are handled by advancing both sides.
pub fn ks_two_sample(a: &EmpiricalDistribution, b: &EmpiricalDistribution) -> KsResult {
    let (xs, ys) = (a.values(), b.values());
    let (n1, n2) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n1 - j as f64 / n2).abs());
    }
    KsResult {
        statistic: d,
        p_value: ks_p_value(d, xs.len(), ys.len()),
    }
}

/// One-sample KS against a continuous CDF.
pub fn ks_one_sample(a: &EmpiricalDistribution, cdf: impl Fn(f64) -> f64) -> KsResult {
    let xs = a.values();
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    let sq = n.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d),
    }
}

/// Percentile bootstrap CI for the two-sample KS distance.
pub fn ks_bootstrap_ci(
    a: &EmpiricalDistribution,
    b: &EmpiricalDistribution,
    reps: usize,
    level: f64,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let mut ds = Vec::with_capacity(reps);
    for _ in 0..reps {
        let ra: Vec<f64> = (0..a.len())
            .map(|_| a.values()[rng.random_range(0..a.len())])
            .collect();
        let rb: Vec<f64> = (0..b.len())
            .map(|_| b.values()[rng.random_range(0..b.len())])
            .collect();
        let da = EmpiricalDistribution::new(ra).unwrap();
        let db = EmpiricalDistribution::new(rb).unwrap();
        ds.push(ks_two_sample(&da, &db).statistic);
    }
    ds.sort_by(f64::total_cmp);
    let lo_idx = ((1.0 - level) / 2.0 * reps as f64).floor() as usize;
    let hi_idx = (((1.0 + level) / 2.0) * reps as f64).ceil() as usize - 1;
    (ds[lo_idx.min(reps - 1)], ds[hi_idx.min(reps - 1)])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chi2Result {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Chi-square goodness of fit of integer samples against Poisson(lambda).
/// Cells with expected count below 5 are pooled into the tail.
pub fn chi2_poisson_fit(samples: &[usize], lambda: f64) -> Result<Chi2Result> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    let n = samples.len() as f64;
    let k_max = *samples.iter().max().unwrap();
    let mut observed = vec![0.0; k_max + 2];
    for &s in samples {
        observed[s] += 1.0;
    }
    // Poisson pmf by recurrence, remainder mass in the last cell
    let mut expected = vec![0.0; k_max + 2];
    let mut pmf = (-lambda).exp();
    let mut used = 0.0;
    for (k, e) in expected.iter_mut().enumerate().take(k_max + 1) {
        *e = n * pmf;
        used += pmf;
        pmf *= lambda / (k as f64 + 1.0);
    }
    expected[k_max + 1] = n * (1.0 - used).max(0.0);

    // pool low-expectation cells from the right
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut acc_o = 0.0;
    let mut acc_e = 0.0;
    for (o, e) in observed.iter().zip(&expected).rev() {
        acc_o += o;
        acc_e += e;
        if acc_e >= 5.0 {
            cells.push((acc_o, acc_e));
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    if acc_e > 0.0 {
        if let Some(last) = cells.last_mut() {
            last.0 += acc_o;
            last.1 += acc_e;
        } else {
            cells.push((acc_o, acc_e));
        }
    }
    if cells.len() < 2 {
        return Err(Error::InvalidInput(
            "not enough cells for a chi-square fit".into(),
        ));
    }
    let statistic: f64 = cells
        .iter()
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    let dof = cells.len() - 1;
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::InvalidInput(format!("chi2 dof: {e}")))?;
    Ok(Chi2Result {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_basics() {
        let e = MCEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0], 0.95);
        assert_eq!(e.n, 4);
        assert!((e.mean - 2.5).abs() < 1e-15);
        // sd = sqrt(5/3), se = sd/2
        assert!((e.std_error - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        let exact = MCEstimate::exact(2.5, 0.95);
        assert_eq!(e.z_against(&exact), 0.0);
    }

    #[test]
    fn ks_trivial_cases() {
        let a = EmpiricalDistribution::new(vec![1.0, 2.0, 3.0]).unwrap();
        let same = ks_two_sample(&a, &a);
        assert_eq!(same.statistic, 0.0);
        let b = EmpiricalDistribution::new(vec![10.0, 11.0]).unwrap();
        let disjoint = ks_two_sample(&a, &b);
        assert_eq!(disjoint.statistic, 1.0);
        // {1,2,3} vs {2,3,4}: sup gap is 1/3
        let c = EmpiricalDistribution::new(vec![2.0, 3.0, 4.0]).unwrap();
        let r = ks_two_sample(&a, &c);
        assert!((r.statistic - 1.0 / 3.0).abs() < 1e-15);
        assert!(EmpiricalDistribution::new(vec![]).is_err());
    }

    #[test]
    fn chi2_detects_the_right_poisson() {
        let mut rng = crate::rng::stream_rng(4, 77, 0);
        let lambda = 2.0;
        let samples: Vec<usize> = (0..4000)
            .map(|_| {
                // inverse-cdf Poisson draw
                let u: f64 = rng.random();
                let mut k = 0usize;
                let mut pmf = (-lambda as f64).exp();
                let mut cdf = pmf;
                while u > cdf && k < 100 {
                    k += 1;
                    pmf *= lambda / k as f64;
                    cdf += pmf;
                }
                k
            })
            .collect();
        let fit = chi2_poisson_fit(&samples, lambda).unwrap();
        assert!(fit.p_value > 0.01, "good fit expected, got {fit:?}");
        let bad = chi2_poisson_fit(&samples, 3.0).unwrap();
        assert!(bad.p_value < 1e-6, "bad fit expected, got {bad:?}");
    }

    #[test]
    fn kolmogorov_sf_endpoints() {
        assert_eq!(kolmogorov_sf(0.0), 1.0);
        assert!(kolmogorov_sf(3.0) < 1e-7);
        // classical value Q(1.0) ~ 0.26999
        assert!((kolmogorov_sf(1.0) - 0.26999967).abs() < 1e-6);
    }
}

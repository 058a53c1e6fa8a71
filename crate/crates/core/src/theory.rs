//! The ξ² law for a linear classifier built by one gradient step on T1:
//! `ξ² = ‖δ_{u₁}‖² / ‖δ_{S_orth}‖² ~ (σ²/(Nε²)) χ²_S`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{gen_t1, T1Params};
use crate::error::{Error, Result};
use crate::margins::{median, t1_probe_sequence};
use crate::models::linear_onestep;
use crate::seeding::child_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XiLawParams {
    pub n_samples: usize,
    pub epsilon: f64,
    pub sigma: f64,
    pub subspace_dim: usize,
}

impl XiLawParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.subspace_dim == 0 || !(self.epsilon > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter("need N, S >= 1, epsilon > 0, sigma >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Xi2Law {
    /// `σ²/(Nε²)`.
    pub scale: f64,
    /// Wilson–Hilferty approximation `scale · S (1 − 2/(9S))³`.
    pub median: f64,
    /// `2σ⁴S/(N²ε⁴)`.
    pub variance: f64,
}

pub fn xi2_law(p: &XiLawParams) -> Xi2Law {
    let n = p.n_samples as f64;
    let s = p.subspace_dim as f64;
    let scale = p.sigma * p.sigma / (n * p.epsilon * p.epsilon);
    Xi2Law {
        scale,
        median: scale * s * (1.0 - 2.0 / (9.0 * s)).powi(3),
        variance: 2.0 * scale * scale * s,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Xi2Sample {
    pub values: Vec<f64>,
    /// Reps with a degenerate weight vector (all labels equal or `w₁ = 0`).
    pub discarded: usize,
}

/// One ξ² value per rep: fresh T1 draw, one-step linear model, random
/// `S`-dimensional subspace orthogonal to `u₁`. Uses `‖P_S w‖² / ‖P_{u₁} w‖²`,
/// which equals the squared margin ratio for every observation point.
/// Projections below `1e−12 ‖w‖` count as zero.
pub fn xi2_empirical(t1: &T1Params, s: usize, reps: usize, seed: u64) -> Result<Xi2Sample> {
    if reps == 0 {
        return Err(Error::InvalidParameter("reps must be >= 1".into()));
    }
    t1.validate()?;
    if s == 0 || s >= t1.dim {
        return Err(Error::TooManyDimensions { requested: s, ambient: t1.dim.saturating_sub(1) });
    }
    let outcomes = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let params = T1Params { seed: child_seed(seed, 2 * rep as u64), ..*t1 };
            let ds = gen_t1(params)?;
            if ds.labels.iter().all(|&y| y == ds.labels[0]) {
                return Ok(None);
            }
            let w = linear_onestep(&ds)?.layers[0].weight.row(0).to_owned();
            let probes = t1_probe_sequence(ds.rotation.as_ref().expect("T1 stores U"), s, child_seed(seed, 2 * rep as u64 + 1))?;
            let along = probes.items[0].energy(w.view())?;
            let orth = probes.items[2].energy(w.view())?;
            let floor = (1e-12 * w.dot(&w).sqrt()).powi(2);
            if along <= floor {
                return Ok(None);
            }
            Ok(Some(if orth <= floor { 0.0 } else { orth / along }))
        })
        .collect::<Result<Vec<_>>>()?;
    let discarded = outcomes.iter().filter(|o| o.is_none()).count();
    Ok(Xi2Sample { values: outcomes.into_iter().flatten().collect(), discarded })
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`, absolute accuracy ~1e−10 or better.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // series
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..10_000 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        // continued fraction for Q(a, x), modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - (log_prefix.exp() * h)).max(0.0)
    }
}

/// CDF of χ² with `k` degrees of freedom.
pub fn chi2_cdf(x: f64, k: usize) -> f64 {
    gamma_p(k as f64 / 2.0, x / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Two-sided Kolmogorov–Smirnov statistic of `sample / scale` against χ²_S.
pub fn ks_statistic(sample: &[f64], scale: f64, s: usize) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Empty("KS sample".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter("reference scale must be > 0".into()));
    }
    let mut u: Vec<f64> = sample.iter().map(|v| v / scale).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    Ok(u.iter().enumerate().fold(0.0f64, |acc, (i, &v)| {
        let f = chi2_cdf(v, s);
        acc.max((i + 1) as f64 / n - f).max(f - i as f64 / n)
    }))
}

pub fn distribution_compare(sample: &[f64], reference_scale: f64, s: usize, threshold: f64) -> Result<KsResult> {
    let statistic = ks_statistic(sample, reference_scale, s)?;
    Ok(KsResult { statistic, threshold, pass: statistic <= threshold })
}

fn default_ks_threshold() -> f64 {
    0.08
}
fn default_median_tolerance() -> f64 {
    0.2
}

/// Input of the theory check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub n_samples: usize,
    pub epsilon: f64,
    pub sigma: f64,
    pub dim: usize,
    pub subspace_dim: usize,
    pub reps: usize,
    pub seed: u64,
    /// Epsilon used for the reference law; defaults to `epsilon`.
    #[serde(default)]
    pub reference_epsilon: Option<f64>,
    #[serde(default = "default_ks_threshold")]
    pub ks_threshold: f64,
    /// Allowed relative deviation of the empirical median from the law.
    #[serde(default = "default_median_tolerance")]
    pub median_tolerance: f64,
}

impl TheoryConfig {
    /// `N = 10⁴, ε = 5, σ = 1, D = 100, S = 3`, 500 reps.
    pub fn reference(seed: u64) -> Self {
        Self {
            n_samples: 10_000,
            epsilon: 5.0,
            sigma: 1.0,
            dim: 100,
            subspace_dim: 3,
            reps: 500,
            seed,
            reference_epsilon: None,
            ks_threshold: default_ks_threshold(),
            median_tolerance: default_median_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMoments {
    pub n: usize,
    pub discarded: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: TheoryConfig,
    pub law: Xi2Law,
    pub empirical: EmpiricalMoments,
    pub median_relative_error: Option<f64>,
    pub ks: Option<KsResult>,
    /// `σ = 0`: the law collapses to a point mass at 0.
    pub degenerate: bool,
    pub pass: bool,
}

pub fn run_theory(config: &TheoryConfig) -> Result<TheoryReport> {
    let law_params = XiLawParams {
        n_samples: config.n_samples,
        epsilon: config.reference_epsilon.unwrap_or(config.epsilon),
        sigma: config.sigma,
        subspace_dim: config.subspace_dim,
    };
    law_params.validate()?;
    let law = xi2_law(&law_params);
    let t1 = T1Params { epsilon: config.epsilon, sigma: config.sigma, n_samples: config.n_samples, dim: config.dim, seed: 0 };
    let sample = xi2_empirical(&t1, config.subspace_dim, config.reps, config.seed)?;
    let v = &sample.values;
    let n = v.len();
    let mean = (n > 0).then(|| v.iter().sum::<f64>() / n as f64);
    let variance = (n > 1).then(|| {
        let m = mean.expect("n > 0");
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
    });
    let emp_median = median(v);
    let degenerate = config.sigma == 0.0;
    let (median_relative_error, ks, pass) = if degenerate {
        (None, None, n > 0 && v.iter().all(|&x| x == 0.0))
    } else {
        let rel = emp_median.map(|m| (m - law.median).abs() / law.median);
        let ks = if n > 0 { Some(distribution_compare(v, law.scale, config.subspace_dim, config.ks_threshold)?) } else { None };
        let pass = matches!(rel, Some(r) if r <= config.median_tolerance) && ks.is_some_and(|k| k.pass);
        (rel, ks, pass)
    };
    Ok(TheoryReport {
        config: *config,
        law,
        empirical: EmpiricalMoments { n, discarded: sample.discarded, mean, median: emp_median, variance },
        median_relative_error,
        ks,
        degenerate,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::linear_margin;
    use crate::seeding;
    use rand_distr::{ChiSquared, Distribution};
    use statrs::distribution::{ChiSquared as StatrsChi2, ContinuousCDF};

    fn reference_law() -> XiLawParams {
        XiLawParams { n_samples: 10_000, epsilon: 5.0, sigma: 1.0, subspace_dim: 3 }
    }

    #[test]
    fn law_reference_values() {
        let l = xi2_law(&reference_law());
        assert_close!(l.scale, 4.0e-6, 1e-18);
        assert_close!(l.median, 9.526e-6, 1e-9);
        assert_close!(l.variance, 9.6e-11, 1e-20);
        // Monte-Carlo median of scale · χ²₃
        let mut rng = seeding::rng(1);
        let chi = ChiSquared::new(3.0).unwrap();
        let draws: Vec<f64> = (0..1_000_000).map(|_| chi.sample(&mut rng) * l.scale).collect();
        let mc = median(&draws).unwrap();
        assert!((mc - l.median).abs() / l.median < 0.01);
    }

    #[test]
    fn law_limits() {
        let big = xi2_law(&XiLawParams { subspace_dim: 100_000, ..reference_law() });
        assert!((big.median / (big.scale * 100_000.0) - 1.0).abs() < 1e-4);
        let doubled = xi2_law(&XiLawParams { epsilon: 10.0, ..reference_law() });
        assert_close!(doubled.scale * 4.0, xi2_law(&reference_law()).scale, 1e-20);
    }

    #[test]
    fn chi2_cdf_matches_statrs() {
        for k in 1..=12 {
            let oracle = StatrsChi2::new(k as f64).unwrap();
            for &x in &[1e-4, 0.01, 0.3, 1.0, 2.5, 5.0, 9.0, 20.0, 60.0] {
                assert!((chi2_cdf(x, k) - oracle.cdf(x)).abs() < 1e-10, "k={k} x={x}");
            }
        }
    }

    #[test]
    fn chi2_cdf_at_approximate_median() {
        for s in 1..=10 {
            let sf = s as f64;
            let m = sf * (1.0 - 2.0 / (9.0 * sf)).powi(3);
            let c = chi2_cdf(m, s);
            assert!((0.48..=0.52).contains(&c), "S={s}: {c}");
        }
    }

    #[test]
    fn ks_examples() {
        let chi = ChiSquared::new(3.0).unwrap();
        let mut rng = seeding::rng(2);
        let scale = 4e-6;
        let draws: Vec<f64> = (0..10_000).map(|_| chi.sample(&mut rng) * scale).collect();
        assert!(ks_statistic(&draws, scale, 3).unwrap() < 0.02);
        assert!(ks_statistic(&draws, scale * 10.0, 3).unwrap() > 0.3);
        assert!(ks_statistic(&[1.0; 50], 1.0, 3).unwrap() >= 0.5);
        assert!(matches!(ks_statistic(&[], 1.0, 3), Err(Error::Empty(_))));
    }

    fn small_t1(sigma: f64) -> T1Params {
        T1Params { epsilon: 5.0, sigma, n_samples: 2_000, dim: 30, seed: 0 }
    }

    #[test]
    fn sigma_zero_gives_zero() {
        let s = xi2_empirical(&small_t1(0.0), 3, 10, 4).unwrap();
        assert_eq!(s.values, vec![0.0; 10]);
    }

    #[test]
    fn ratio_matches_margin_ratio_for_any_observation() {
        let params = T1Params { seed: 17, ..small_t1(1.0) };
        let ds = gen_t1(params).unwrap();
        let w = linear_onestep(&ds).unwrap().layers[0].weight.row(0).to_owned();
        let probes = t1_probe_sequence(ds.rotation.as_ref().unwrap(), 3, 5).unwrap();
        let ratio = probes.items[2].energy(w.view()).unwrap() / probes.items[0].energy(w.view()).unwrap();
        for i in [0, 1, 99] {
            let x = ds.features.row(i);
            let a = linear_margin(w.view(), 0.0, x, Some(&probes.items[0])).unwrap();
            let b = linear_margin(w.view(), 0.0, x, Some(&probes.items[2])).unwrap();
            assert!(((a / b).powi(2) - ratio).abs() <= 1e-10);
        }
    }

    #[test]
    fn empirical_is_deterministic_and_near_law() {
        let a = xi2_empirical(&small_t1(1.0), 3, 200, 9).unwrap();
        let b = xi2_empirical(&small_t1(1.0), 3, 200, 9).unwrap();
        assert_eq!(a, b);
        let law = xi2_law(&XiLawParams { n_samples: 2_000, epsilon: 5.0, sigma: 1.0, subspace_dim: 3 });
        let m = median(&a.values).unwrap();
        assert!((m - law.median).abs() / law.median < 0.25);
    }

    #[test]
    fn degenerate_report() {
        let cfg = TheoryConfig { n_samples: 500, dim: 20, reps: 5, sigma: 0.0, ..TheoryConfig::reference(1) };
        let r = run_theory(&cfg).unwrap();
        assert!(r.degenerate && r.pass && r.ks.is_none());
    }
}

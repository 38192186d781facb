//! Johnson–Lindenstrauss inner-product concentration.
//!
//! For a random matrix `θ0 ∈ R^{d x d}` with i.i.d. entries of variance
//! `1/d` and vectors with norms at most `c`, the deviation
//! `|(θ0 x_i)ᵀ(θ0 x_j) - x_iᵀ x_j|` exceeds `c·ε` with probability at most
//! `4 exp(-(ε² - ε³) d / 4)`. The variance-1/d scaling makes the projected
//! inner product an unbiased estimate of the original one.

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::NtkError;

/// Analytic failure bound `4 exp(-(ε² - ε³) d / 4)`. May exceed 1, in
/// which case the bound is vacuous.
pub fn jl_failure_bound(eps: f64, dim: usize) -> f64 {
    4.0 * (-(eps * eps - eps * eps * eps) * dim as f64 / 4.0).exp()
}

/// Success probability `1 - 4 exp(-(ε² - ε³) d / 4)`, clamped to `[0, 1]`
/// for reporting.
pub fn jl_bound(eps: f64, dim: usize) -> Result<f64, NtkError> {
    if !(0.0..1.0).contains(&eps) || eps == 0.0 {
        return Err(NtkError::Config(format!("eps must lie in (0, 1), got {eps}")));
    }
    if dim == 0 {
        return Err(NtkError::Config("dimension must be >= 1".into()));
    }
    Ok((1.0 - jl_failure_bound(eps, dim)).clamp(0.0, 1.0))
}

/// Outcome of a Monte-Carlo run against the analytic bound.
#[derive(Debug, Clone, serde::Serialize)]
pub struct JlBoundRecord {
    pub eps: f64,
    pub c: f64,
    pub dim: usize,
    pub trials: usize,
    pub failures: usize,
    pub empirical_failure_freq: f64,
    pub analytic_failure_bound: f64,
    /// Bound plus a 3σ binomial margin at the bound's own rate.
    pub threshold: f64,
    /// True when the analytic bound is at least 1 and thus says nothing.
    pub vacuous: bool,
    pub within_bound: bool,
}

/// One deviation sample: draws θ0 row by row (entries N(0, 1/d)) and a
/// unit-norm probe pair, and returns
/// `|(θ0 x_i)ᵀ(θ0 x_j) - x_iᵀ x_j|`. With `equal_pair`, x_j = x_i (the
/// norm-preservation special case).
pub fn jl_deviation_sample(dim: usize, rng: &mut StdRng, equal_pair: bool) -> f64 {
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let entry = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid");

    let mut xi: Vec<f64> = (0..dim).map(|_| unit.sample(rng)).collect();
    normalize(&mut xi);
    let xj = if equal_pair {
        xi.clone()
    } else {
        let mut v: Vec<f64> = (0..dim).map(|_| unit.sample(rng)).collect();
        normalize(&mut v);
        v
    };

    let exact: f64 = xi.iter().zip(&xj).map(|(a, b)| a * b).sum();
    let mut projected = 0.0;
    let mut row = vec![0.0; dim];
    for _ in 0..dim {
        for r in row.iter_mut() {
            *r = entry.sample(rng);
        }
        let ui: f64 = row.iter().zip(&xi).map(|(a, b)| a * b).sum();
        let uj: f64 = row.iter().zip(&xj).map(|(a, b)| a * b).sum();
        projected += ui * uj;
    }
    (projected - exact).abs()
}

/// Monte-Carlo check of the bound: count trials whose deviation reaches
/// `c·ε` and compare the frequency with the analytic bound plus a 3σ
/// binomial margin.
pub fn jl_empirical(
    dim: usize,
    trials: usize,
    eps: f64,
    c: f64,
    seed: u64,
) -> Result<JlBoundRecord, NtkError> {
    if !(0.0..1.0).contains(&eps) || eps == 0.0 {
        return Err(NtkError::Config(format!("eps must lie in (0, 1), got {eps}")));
    }
    if trials == 0 {
        return Err(NtkError::Config("trials must be >= 1".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let threshold_dev = c * eps;
    let mut failures = 0usize;
    for _ in 0..trials {
        if jl_deviation_sample(dim, &mut rng, false) >= threshold_dev {
            failures += 1;
        }
    }
    let freq = failures as f64 / trials as f64;
    let bound = jl_failure_bound(eps, dim);
    let p = bound.min(1.0);
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    let threshold = bound + 3.0 * sigma;
    Ok(JlBoundRecord {
        eps,
        c,
        dim,
        trials,
        failures,
        empirical_failure_freq: freq,
        analytic_failure_bound: bound,
        threshold,
        vacuous: bound >= 1.0,
        within_bound: freq <= threshold,
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        // (0.25 - 0.125) * 128 / 4 = 4.
        let b = jl_bound(0.5, 128).unwrap();
        assert!((b - (1.0 - 4.0 * (-4.0f64).exp())).abs() < 1e-15);
        assert!((b - 0.926_737).abs() < 1e-6);

        // d=16 makes the bound negative before clamping.
        assert_eq!(jl_bound(0.5, 16).unwrap(), 0.0);

        assert!(jl_bound(0.0, 128).is_err());
        assert!(jl_bound(1.5, 128).is_err());
    }

    #[test]
    fn bound_is_monotone_in_dimension() {
        let mut prev = 0.0;
        for d in [32, 64, 128, 256, 512] {
            let b = jl_bound(0.5, d).unwrap();
            assert!(b >= prev);
            prev = b;
        }
        assert!(prev > 0.999);
    }

    #[test]
    fn equal_pair_deviation_concentrates_near_zero() {
        let mut rng = StdRng::seed_from_u64(11);
        let trials = 300;
        let mut exceeded = 0;
        for _ in 0..trials {
            if jl_deviation_sample(256, &mut rng, true) >= 0.5 {
                exceeded += 1;
            }
        }
        // Norm preservation at d=256: essentially no mass at deviation 0.5.
        assert!(exceeded <= 1, "{exceeded} of {trials} exceeded");
    }

    #[test]
    fn small_dimension_bound_is_vacuous() {
        let record = jl_empirical(8, 500, 0.5, 1.0, 7).unwrap();
        assert!(record.vacuous);
        assert!(record.within_bound);
        assert!(record.analytic_failure_bound > 1.0);
    }

    #[test]
    fn d128_failure_rate_is_far_below_bound() {
        let record = jl_empirical(128, 2_000, 0.5, 1.0, 13).unwrap();
        assert!(!record.vacuous);
        assert!(record.within_bound);
        assert!(record.empirical_failure_freq < record.analytic_failure_bound);
    }
}

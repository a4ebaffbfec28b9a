//! Monte Carlo and exhaustive checks of the estimator, stabilizer and coverage
//! bounds, shared by the command line and the test suite.

use crate::allocator::{self, AllocError};
use crate::fsm::{FsmParams, FsmState};
use crate::rng;
use crate::sampler::{self, coverage_lower_bound, SamplerParams};
use crate::stats;
use crate::tracker::{SmoothingParams, UtilityTracker};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    /// Pass threshold for the measured value: an upper limit, or a floor for coverage.
    pub limit: f64,
    pub pass: bool,
}

impl BoundCheck {
    fn at_most(name: impl Into<String>, measured: f64, bound: f64, limit: f64) -> Self {
        Self { name: name.into(), measured, bound, limit, pass: measured <= limit }
    }
}

/// Variance of the EMA after `audits` noisy observations of a constant mean,
/// across `replicas` independent trackers.
pub fn ema_variance(beta: f64, sigma: f64, replicas: usize, audits: usize, seed: u64) -> f64 {
    let params = SmoothingParams { beta, lambda_s: 0.0, window: 5 };
    let finals: Vec<f64> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut noise = rng::stream(&[seed, r]);
            let mut t = UtilityTracker::new(0, params.window);
            let mut ema = 0.0;
            for c in 0..audits as u64 {
                let z: f64 = noise.sample(StandardNormal);
                ema = t.record_audit(1.0 + sigma * z, &params, c).expect("finite utility");
            }
            ema
        })
        .collect();
    stats::sample_variance(&finals)
}

pub fn check_ema_variance(beta: f64, sigma: f64, replicas: usize, audits: usize, seed: u64) -> BoundCheck {
    let bound = SmoothingParams { beta, ..Default::default() }.ema_variance_bound(sigma * sigma);
    BoundCheck::at_most(
        format!("ema variance (beta={beta}, sigma={sigma})"),
        ema_variance(beta, sigma, replicas, audits, seed),
        bound,
        1.1 * bound,
    )
}

/// Largest absolute EMA lag over the last half of `audits` noise-free
/// observations of `delta * t`.
pub fn ema_drift_bias(beta: f64, delta: f64, audits: usize) -> f64 {
    let params = SmoothingParams { beta, lambda_s: 0.0, window: 5 };
    let mut t = UtilityTracker::new(0, params.window);
    let mut worst: f64 = 0.0;
    for c in 0..audits {
        let mu = delta * c as f64;
        let ema = t.record_audit(mu, &params, c as u64).expect("finite utility");
        if c >= audits / 2 {
            worst = worst.max((ema - mu).abs());
        }
    }
    worst
}

pub fn check_ema_drift(beta: f64, delta: f64, audits: usize) -> BoundCheck {
    let bound = SmoothingParams { beta, ..Default::default() }.ema_drift_bias_bound(delta);
    BoundCheck::at_most(
        format!("ema drift bias (beta={beta}, delta={delta})"),
        ema_drift_bias(beta, delta, audits),
        bound,
        1.05 * bound,
    )
}

/// Drives a fresh stabilizer with per-cycle proposals and returns its change-cycle count.
pub fn fsm_change_cycles(params: FsmParams, n_units: usize, proposals: impl IntoIterator<Item = Vec<bool>>) -> u64 {
    let mut fsm = FsmState::new(n_units, params);
    let mut gates = vec![false; n_units];
    for p in proposals {
        gates = fsm.filter_proposals(&gates, &p, None).expect("proposal length").gates;
    }
    fsm.change_cycles()
}

/// Largest change-cycle count over every single-unit proposal sequence of length `cycles`.
pub fn fsm_exhaustive_max(tau_act: u32, cycles: u32) -> u64 {
    let params = FsmParams { tau_act, tau_rank: tau_act };
    (0..1u32 << cycles)
        .into_par_iter()
        .map(|mask| fsm_change_cycles(params, 1, (0..cycles).map(|t| vec![mask >> t & 1 == 1])))
        .max()
        .unwrap_or(0)
}

/// Change cycles under the sequence that flips as often as the counters allow:
/// every unit proposes the opposite of its gate each cycle.
pub fn fsm_adversarial(tau_act: u32, n_units: usize, cycles: u64) -> u64 {
    let mut fsm = FsmState::new(n_units, FsmParams { tau_act, tau_rank: tau_act });
    let mut gates = vec![false; n_units];
    for _ in 0..cycles {
        let flipped: Vec<bool> = gates.iter().map(|g| !g).collect();
        gates = fsm.filter_proposals(&gates, &flipped, None).expect("proposal length").gates;
    }
    fsm.change_cycles()
}

pub fn check_fsm_adversarial(tau_act: u32, cycles: u64) -> BoundCheck {
    let bound = FsmParams { tau_act, tau_rank: tau_act }.chatter_bound(cycles) as f64;
    BoundCheck::at_most(
        format!("fsm change cycles (tau_act={tau_act}, T={cycles})"),
        fsm_adversarial(tau_act, 4, cycles) as f64,
        bound,
        bound,
    )
}

pub fn check_fsm_exhaustive(tau_act: u32, cycles: u32) -> BoundCheck {
    let bound = FsmParams { tau_act, tau_rank: tau_act }.chatter_bound(u64::from(cycles)) as f64;
    BoundCheck::at_most(
        format!("fsm change cycles, all sequences (tau_act={tau_act}, T={cycles})"),
        fsm_exhaustive_max(tau_act, cycles) as f64,
        bound,
        bound,
    )
}

/// Probe counts after `cycles` audit batches over frozen gates.
pub fn coverage_probe_counts(gates: &[bool], params: &SamplerParams, cycles: u64, seed: u64) -> Vec<u64> {
    let mut counts = vec![0u64; gates.len()];
    for t in 0..cycles {
        let mut r = rng::stream(&[rng::tag::SAMPLER, seed, t]);
        let batch = sampler::sample_audit_batch(gates, &counts, params, &mut r).expect("valid sampler params");
        for i in batch.batch {
            counts[i] += 1;
        }
    }
    counts
}

/// `rho * T - 4 * sqrt(rho * (1 - rho) * T)`.
pub fn coverage_floor(rho: f64, cycles: u64) -> f64 {
    let t = cycles as f64;
    rho * t - 4.0 * (rho * (1.0 - rho) * t).sqrt()
}

/// Coverage rate bound, plus whether the least-probed unit stays above
/// [`coverage_floor`] in every seeded frozen-gate run. The first sixth of the
/// units is active.
pub fn check_coverage(n: usize, params: &SamplerParams, cycles: u64, seeds: u64) -> Result<BoundCheck, sampler::SamplerError> {
    let rho = coverage_lower_bound(n, params.batch_size, params.epsilon)?;
    params.validate(n)?;
    let gates: Vec<bool> = (0..n).map(|i| i < n / 6).collect();
    let floor = coverage_floor(rho, cycles);
    let worst = (0..seeds)
        .map(|s| coverage_probe_counts(&gates, params, cycles, s).into_iter().min().unwrap_or(0))
        .min()
        .unwrap_or(0) as f64;
    Ok(BoundCheck {
        name: format!("coverage rate (N={n}, M={}, eps={})", params.batch_size, params.epsilon),
        measured: worst / cycles as f64,
        bound: rho,
        limit: floor / cycles as f64,
        pass: worst >= floor,
    })
}

/// Random knapsack instance with `n` units: scores uniform in [0, 1), costs
/// log-uniform over two decades, budget a random 10-90% of the total cost.
pub fn random_knapsack<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>, f64) {
    let scores = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let costs: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-4.0..-2.0))).collect();
    let budget = costs.iter().sum::<f64>() * rng.random_range(0.1..0.9);
    (scores, costs, budget)
}

/// Ratio of the final re-solve's score to the exact optimum on `instances`
/// random instances with 1 to `n_max` units. An optimum of zero counts as 1.
pub fn allocator_ratios(instances: usize, n_max: usize, seed: u64) -> Result<Vec<f64>, AllocError> {
    if n_max == 0 || n_max > allocator::BRUTE_FORCE_CAP {
        return Err(AllocError::TooLarge { eligible: n_max, cap: allocator::BRUTE_FORCE_CAP });
    }
    (0..instances as u64)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(&[seed, k]);
            let n = r.random_range(1..=n_max);
            let (scores, costs, budget) = random_knapsack(n, &mut r);
            let eligible = vec![true; n];
            let got = allocator::final_resolve(&scores, &costs, &eligible, budget)?;
            let best = allocator::brute_force_optimum(&scores, &costs, &eligible, budget)?;
            Ok(if best.total_score > 0.0 { got.total_score / best.total_score } else { 1.0 })
        })
        .collect()
}

/// The default table printed by `verify-bounds`.
pub fn default_checks() -> Vec<BoundCheck> {
    let mut checks = vec![
        check_ema_variance(0.9, 1.0, 10_000, 200, 11),
        check_ema_variance(0.5, 1.0, 10_000, 200, 12),
        check_ema_drift(0.9, 0.01, 2000),
    ];
    checks.extend((1..=3).map(|tau| check_fsm_exhaustive(tau, 12)));
    checks.push(check_fsm_adversarial(3, 90));
    let params = SamplerParams { batch_size: 6, active_fraction: 0.3, epsilon: 0.3 };
    checks.push(check_coverage(60, &params, 2000, 5).expect("default sampler params are valid"));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adversarial_sequence_reaches_the_bound() {
        assert_eq!(fsm_adversarial(3, 4, 90), 30);
        assert_eq!(fsm_adversarial(1, 2, 10), 10);
        assert_eq!(fsm_exhaustive_max(2, 8), 4);
    }

    #[test]
    fn drift_lag_converges_to_bound() {
        let lag = ema_drift_bias(0.9, 0.01, 400);
        assert!((lag - 0.09).abs() < 1e-9, "{lag}");
    }

    #[test]
    fn singleton_instances_are_solved_exactly() {
        assert!(allocator_ratios(50, 1, 3).unwrap().iter().all(|&r| r == 1.0));
        assert!(allocator_ratios(1, 21, 3).is_err());
    }

    #[test]
    fn coverage_floor_arithmetic() {
        let f = coverage_floor(0.03, 2000);
        assert!((f - (60.0 - 4.0 * (0.03f64 * 0.97 * 2000.0).sqrt())).abs() < 1e-12);
    }
}

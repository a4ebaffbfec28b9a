//! Random configurations at a matched budget.

use super::{build_oracle, build_space, refinetune_value, DriverError, RunConfig};
use crate::allocator::within_budget;
use crate::rng::{self, tag};
use rand::seq::SliceRandom;
use rand::Rng;

/// A random maximal feasible subset: units in random order, each kept if it
/// still fits.
pub fn random_fill<R: Rng + ?Sized>(costs: &[f64], budget: f64, rng: &mut R) -> Vec<bool> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.shuffle(rng);
    let mut gates = vec![false; costs.len()];
    let mut used = 0.0;
    for i in order {
        if within_budget(used + costs[i], budget) {
            gates[i] = true;
            used += costs[i];
        }
    }
    gates
}

/// Final values of `n_samples` random configurations, each trained from
/// scratch for the same step budget as the final phase of a run.
pub fn run_random_baseline(config: &RunConfig, n_samples: usize) -> Result<Vec<f64>, DriverError> {
    if n_samples == 0 {
        return Err(DriverError::Config("n_samples must be at least 1".into()));
    }
    config.validate()?;
    let space = build_space(config)?;
    let oracle = build_oracle(config, &space)?;
    let costs = space.costs();
    (0..n_samples as u64)
        .map(|s| {
            let mut rng = rng::stream(&[tag::BASELINE, config.seed, s]);
            let gates = random_fill(&costs, config.allocator.budget, &mut rng);
            let call = rng::derive_seed(&[tag::BASELINE, config.seed, s, u64::MAX]);
            Ok(refinetune_value(&oracle, &gates, config.refinetune_steps(), call)?)
        })
        .collect()
}

//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sea_alloc::driver::{build_oracle, build_space, Engine, ExecOptions, RunConfig};
use sea_alloc::oracle::SyntheticOracle;

/// Knapsack instance with scores in [0, 1) and costs log-uniform between 1e-5
/// and 1e-3, budget a fifth of the total cost.
pub struct Instance {
    pub scores: Vec<f64>,
    pub costs: Vec<f64>,
    pub eligible: Vec<bool>,
    pub budget: f64,
}

pub fn instance(n: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let costs: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-5.0..-3.0))).collect();
    let budget = costs.iter().sum::<f64>() / 5.0;
    Instance { scores, costs, eligible: vec![true; n], budget }
}

/// Engine over the reference synthetic setup, ready for its first cycle.
pub fn reference_engine(seed: u64, exec: ExecOptions) -> Engine<SyntheticOracle> {
    let config = RunConfig::synthetic(seed, 1);
    let space = build_space(&config).expect("reference space builds");
    let oracle = build_oracle(&config, &space).expect("reference oracle builds");
    Engine::new(&config, space, oracle, exec).expect("reference config is valid")
}

//! Synthetic ground-truth utility surface.
//!
//! Each unit's contribution follows a saturating learning curve
//! `mu_inf * (eta + (1 - eta) * (1 - exp(-s / kappa)))` plus an optional bounded
//! periodic drift. Contributions inside a redundancy group are pooled and passed
//! through a concave power so stacking similar units gives diminishing returns.

use super::{EvalOracle, OracleError, TrainingState};
use crate::allocator::within_budget;
use crate::rng::{self, tag};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::space::{AuditSpace, Family};

/// Period, in training phases, of the drift term.
pub const DRIFT_PERIOD: f64 = 64.0;

const OPTIMUM_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCurve {
    /// Utility once fully trained.
    pub asymptote: f64,
    /// Steps to reach ~63% of the trainable part of the asymptote.
    pub learning_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyGroup {
    pub members: Vec<usize>,
    /// Concavity exponent in (0, 1]; 1 is additive.
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    /// Score of the empty configuration.
    pub base_score: f64,
    pub units: Vec<UnitCurve>,
    /// Largest change of a unit's true utility between consecutive training phases.
    #[serde(default)]
    pub drift: f64,
    /// Standard deviation of evaluation noise.
    pub noise_sd: f64,
    pub groups: Vec<RedundancyGroup>,
    /// Fraction of the asymptote an untrained unit already delivers.
    #[serde(default)]
    pub warm_start: f64,
    pub seed: u64,
}

impl OracleSpec {
    /// Additive spec with one singleton group per unit.
    pub fn additive(base_score: f64, units: Vec<UnitCurve>, noise_sd: f64, seed: u64) -> Self {
        let groups = (0..units.len()).map(|i| RedundancyGroup { members: vec![i], gamma: 1.0 }).collect();
        Self { base_score, units, drift: 0.0, noise_sd, groups, warm_start: 0.0, seed }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::InvalidSpec(m));
        if !(0.0..=1.0).contains(&self.base_score) {
            return bad(format!("base score {} outside [0, 1]", self.base_score));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise sd {}", self.noise_sd));
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return bad(format!("drift {}", self.drift));
        }
        if !(0.0..1.0).contains(&self.warm_start) {
            return bad(format!("warm start {} outside [0, 1)", self.warm_start));
        }
        for (i, u) in self.units.iter().enumerate() {
            if !u.asymptote.is_finite() || u.learning_steps.is_nan() || u.learning_steps <= 0.0 {
                return bad(format!("unit {i} has curve {u:?}"));
            }
        }
        let mut seen = vec![false; self.units.len()];
        for g in &self.groups {
            if !(g.gamma > 0.0 && g.gamma <= 1.0) {
                return bad(format!("group gamma {} outside (0, 1]", g.gamma));
            }
            for &m in &g.members {
                match seen.get_mut(m) {
                    Some(s) if !*s => *s = true,
                    Some(_) => return bad(format!("unit {m} appears in two groups")),
                    None => return bad(format!("group names unknown unit {m}")),
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return bad(format!("unit {i} belongs to no group"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, OracleError> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| OracleError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Knobs for generating an [`OracleSpec`] over an audit space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub seed: u64,
    pub base_score: f64,
    /// Evaluation noise at one shot.
    pub noise_sd: f64,
    /// Concavity inside each insertion site.
    pub gamma: f64,
    pub warm_start: f64,
    pub drift: f64,
    /// Share of units whose fully trained utility is negative.
    pub harmful_fraction: f64,
    /// Utility scale of the best insertion site.
    pub site_gain: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            seed: 0,
            base_score: 0.55,
            noise_sd: 0.03,
            gamma: 0.5,
            warm_start: 0.1,
            drift: 0.0,
            harmful_fraction: 0.25,
            site_gain: 0.06,
        }
    }
}

impl SyntheticParams {
    /// Draws per-unit curves over `space`. Units at the same insertion site form
    /// one redundancy group.
    pub fn generate(&self, space: &AuditSpace) -> OracleSpec {
        let mut rng = rng::stream(&[tag::SYNTHETIC, self.seed]);
        let mut site_quality = BTreeMap::new();
        let mut affinity = BTreeMap::new();
        let mut max_size: BTreeMap<Family, u32> = BTreeMap::new();
        for u in &space.units {
            let m = max_size.entry(u.kind.family).or_default();
            *m = (*m).max(u.kind.size);
        }

        let mut units = Vec::with_capacity(space.len());
        let mut groups: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for u in &space.units {
            let q = *site_quality
                .entry(u.site)
                .or_insert_with(|| self.site_gain * rng.random_range(0.1f64..1.0).powf(1.5));
            let a = *affinity
                .entry(u.sibling_key())
                .or_insert_with(|| rng.random_range(0.2f64..1.0));
            let size_factor = match u.kind.family {
                Family::AffineLN => 1.0,
                f => (f64::from(u.kind.size) / f64::from(max_size[&f])).powf(0.4),
            };
            let jitter = rng.random_range(0.8f64..1.2);
            let harmful = rng.random_bool(self.harmful_fraction.clamp(0.0, 1.0));
            let asymptote = if harmful {
                -rng.random_range(0.0f64..0.2) * self.site_gain
            } else {
                q * a * size_factor * jitter
            };
            let learning_steps = 150.0
                * (1.0 + f64::from(u.kind.size + 1).log2() / 2.0)
                * rng.random_range(0.7f64..1.3);
            units.push(UnitCurve { asymptote, learning_steps });
            groups.entry(u.site).or_default().push(u.id);
        }

        OracleSpec {
            base_score: self.base_score,
            units,
            drift: self.drift,
            noise_sd: self.noise_sd,
            groups: groups
                .into_values()
                .map(|members| RedundancyGroup { members, gamma: self.gamma })
                .collect(),
            warm_start: self.warm_start,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    spec: OracleSpec,
    noise_sd: f64,
    group_scale: Vec<f64>,
    drift_phase: Vec<f64>,
}

impl SyntheticOracle {
    pub fn new(spec: OracleSpec) -> Result<Self, OracleError> {
        spec.validate()?;
        let group_scale = spec
            .groups
            .iter()
            .map(|g| g.members.iter().map(|&i| spec.units[i].asymptote).fold(0.0, f64::max))
            .collect();
        let mut rng = rng::stream(&[tag::DRIFT, spec.seed]);
        let drift_phase = (0..spec.units.len())
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let noise_sd = spec.noise_sd;
        Ok(Self { spec, noise_sd, group_scale, drift_phase })
    }

    /// Multiplies the evaluation noise, e.g. `1 / shots`.
    pub fn with_noise_scale(mut self, factor: f64) -> Self {
        self.noise_sd = self.spec.noise_sd * factor;
        self
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    /// True utility of unit `i` after `steps` of training at phase `clock`.
    pub fn unit_utility(&self, i: usize, steps: f64, clock: u64) -> f64 {
        let curve = self.spec.units[i];
        let eta = self.spec.warm_start;
        let learned = 1.0 - (-steps / curve.learning_steps).exp();
        let mut mu = curve.asymptote * (eta + (1.0 - eta) * learned);
        if self.spec.drift > 0.0 {
            let omega = std::f64::consts::TAU / DRIFT_PERIOD;
            mu += self.spec.drift / omega * (omega * clock as f64 + self.drift_phase[i]).sin();
        }
        mu
    }

    fn check_len(&self, gates: &[bool]) -> Result<(), OracleError> {
        if gates.len() != self.spec.units.len() {
            return Err(OracleError::LengthMismatch { expected: self.spec.units.len(), got: gates.len() });
        }
        Ok(())
    }

    fn pooled(&self, group: usize, total: f64) -> f64 {
        let gamma = self.spec.groups[group].gamma;
        let scale = self.group_scale[group];
        if total > 0.0 && scale > 0.0 && gamma < 1.0 {
            scale * (total / scale).powf(gamma)
        } else {
            total
        }
    }

    /// Noise-free score of `gates`, clamped to [0, 1].
    pub fn value(&self, training: &TrainingState, gates: &[bool]) -> Result<f64, OracleError> {
        self.check_len(gates)?;
        let mut v = self.spec.base_score;
        for (g, group) in self.spec.groups.iter().enumerate() {
            let total: f64 = group
                .members
                .iter()
                .filter(|&&i| gates[i])
                .map(|&i| self.unit_utility(i, training.steps[i], training.clock))
                .sum();
            v += self.pooled(g, total);
        }
        Ok(v.clamp(0.0, 1.0))
    }

    /// `value(gates) - value(gates without i)` for an active unit `i`.
    pub fn true_marginal(&self, training: &TrainingState, gates: &[bool], i: usize) -> Result<f64, OracleError> {
        self.check_len(gates)?;
        if !gates.get(i).copied().unwrap_or(false) {
            return Err(OracleError::InactiveUnit(i));
        }
        let mut without = gates.to_vec();
        without[i] = false;
        Ok(self.value(training, gates)? - self.value(training, &without)?)
    }

    /// Best budget-feasible configuration under `horizon` training, by enumeration.
    /// Ties prefer lower cost, then the lexicographically smaller gate vector.
    pub fn optimum(
        &self,
        horizon: &TrainingState,
        costs: &[f64],
        budget: f64,
    ) -> Result<(Vec<bool>, f64), OracleError> {
        let n = self.spec.units.len();
        if n > OPTIMUM_CAP {
            return Err(OracleError::TooLarge { units: n, cap: OPTIMUM_CAP });
        }
        if costs.len() != n {
            return Err(OracleError::LengthMismatch { expected: n, got: costs.len() });
        }
        let to_gates = |mask: u32| -> Vec<bool> { (0..n).map(|i| mask >> i & 1 == 1).collect() };
        let eval = |mask: u32| -> Option<(u32, f64, f64)> {
            let cost: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| costs[i]).sum();
            if !within_budget(cost, budget) {
                return None;
            }
            let v = self.value(horizon, &to_gates(mask)).ok()?;
            Some((mask, cost, v))
        };
        let pick = |a: (u32, f64, f64), b: (u32, f64, f64)| {
            let ord = a.2.total_cmp(&b.2).then(b.1.total_cmp(&a.1)).then_with(|| {
                let diff = a.0 ^ b.0;
                // the mask whose lowest differing unit is off is lexicographically smaller
                (b.0 & diff & diff.wrapping_neg()).cmp(&(a.0 & diff & diff.wrapping_neg()))
            });
            if ord == std::cmp::Ordering::Less {
                b
            } else {
                a
            }
        };
        let empty = (0u32, 0.0, self.value(horizon, &vec![false; n])?);
        let best = (0..1u32 << n).into_par_iter().filter_map(eval).reduce(|| empty, pick);
        Ok((to_gates(best.0), best.2))
    }
}

impl EvalOracle for SyntheticOracle {
    fn num_units(&self) -> usize {
        self.spec.units.len()
    }

    fn evaluate(&self, training: &TrainingState, gates: &[bool], call_index: u64) -> Result<f64, OracleError> {
        let v = self.value(training, gates)?;
        if self.noise_sd == 0.0 {
            return Ok(v);
        }
        let mut noise = rng::stream(&[tag::EVAL_NOISE, self.spec.seed, call_index]);
        let z: f64 = noise.sample(StandardNormal);
        Ok((v + self.noise_sd * z).clamp(0.0, 1.0))
    }

    fn true_value(&self, training: &TrainingState, gates: &[bool]) -> Option<f64> {
        self.value(training, gates).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::brute_force_optimum;
    use crate::space::{InitialGates, SpaceConfig};
    use crate::stats;

    fn curve(asymptote: f64) -> UnitCurve {
        UnitCurve { asymptote, learning_steps: 100.0 }
    }

    #[test]
    fn empty_configuration_scores_base() {
        let o = SyntheticOracle::new(OracleSpec::additive(0.6, vec![curve(0.1); 3], 0.0, 1)).unwrap();
        let t = TrainingState::uniform(3, 500.0);
        assert_eq!(o.evaluate(&t, &[false; 3], 0).unwrap(), 0.6);
    }

    #[test]
    fn deterministic_evaluation() {
        let o = SyntheticOracle::new(OracleSpec::additive(0.5, vec![curve(0.1); 3], 0.05, 9)).unwrap();
        let t = TrainingState::uniform(3, 50.0);
        let g = [true, false, true];
        assert_eq!(o.evaluate(&t, &g, 17).unwrap(), o.evaluate(&t, &g, 17).unwrap());
        assert_ne!(o.evaluate(&t, &g, 17).unwrap(), o.evaluate(&t, &g, 18).unwrap());
        let clean = SyntheticOracle::new(OracleSpec::additive(0.5, vec![curve(0.1); 3], 0.0, 9)).unwrap();
        assert_eq!(clean.evaluate(&t, &g, 1).unwrap(), clean.evaluate(&t, &g, 2).unwrap());
    }

    #[test]
    fn additive_limit() {
        let o = SyntheticOracle::new(OracleSpec::additive(0.5, vec![curve(0.1), curve(0.2), curve(0.05)], 0.0, 1))
            .unwrap();
        let t = TrainingState::uniform(3, 1e6);
        assert!((o.value(&t, &[true, false, true]).unwrap() - 0.65).abs() < 1e-12);
        assert!((o.value(&t, &[true, true, true]).unwrap() - 0.85).abs() < 1e-12);
        let big = SyntheticOracle::new(OracleSpec::additive(0.9, vec![curve(0.3)], 0.0, 1)).unwrap();
        assert_eq!(big.value(&TrainingState::uniform(1, 1e6), &[true]).unwrap(), 1.0);
    }

    #[test]
    fn cold_start_and_null_units() {
        let o = SyntheticOracle::new(OracleSpec::additive(0.5, vec![curve(0.1), curve(0.0)], 0.0, 1)).unwrap();
        let t = TrainingState::new(2);
        assert_eq!(o.unit_utility(0, 0.0, 0), 0.0);
        assert_eq!(o.true_marginal(&t, &[true, true], 0).unwrap(), 0.0);
        let trained = TrainingState::uniform(2, 300.0);
        assert_eq!(o.true_marginal(&trained, &[true, true], 1).unwrap(), 0.0);
        assert!(matches!(o.true_marginal(&t, &[false, true], 0), Err(OracleError::InactiveUnit(0))));
    }

    #[test]
    fn singleton_marginal_ignores_other_gates() {
        let o = SyntheticOracle::new(OracleSpec::additive(0.3, vec![curve(0.1), curve(0.2)], 0.0, 1)).unwrap();
        let t = TrainingState::uniform(2, 120.0);
        let expected = o.unit_utility(0, 120.0, 0);
        assert!((o.true_marginal(&t, &[true, false], 0).unwrap() - expected).abs() < 1e-15);
        assert!((o.true_marginal(&t, &[true, true], 0).unwrap() - expected).abs() < 1e-15);
    }

    fn redundant_pair(gamma: f64) -> OracleSpec {
        OracleSpec {
            base_score: 0.4,
            units: vec![curve(0.1), curve(0.1), curve(0.06)],
            drift: 0.0,
            noise_sd: 0.0,
            groups: vec![
                RedundancyGroup { members: vec![0, 1], gamma },
                RedundancyGroup { members: vec![2], gamma: 1.0 },
            ],
            warm_start: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn redundancy_diminishes_second_unit() {
        let o = SyntheticOracle::new(redundant_pair(0.5)).unwrap();
        let t = TrainingState::uniform(3, 1e6);
        let alone = o.true_marginal(&t, &[true, false, false], 0).unwrap();
        let second = o.true_marginal(&t, &[true, true, false], 1).unwrap();
        // group scale 0.1: one unit pools to 0.1, two to 0.1 * sqrt(2)
        assert!((alone - 0.1).abs() < 1e-12);
        assert!((second - 0.1 * (2f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!(second < alone);
    }

    #[test]
    fn optimum_swaps_redundant_unit_for_outsider() {
        // budget fits both redundant units, or one plus the outsider
        let o = SyntheticOracle::new(redundant_pair(0.5)).unwrap();
        let t = TrainingState::uniform(3, 1e6);
        let (gates, value) = o.optimum(&t, &[1.0, 1.0, 1.0], 2.0).unwrap();
        // {0,1}: 0.4 + 0.1414; {0,2}: 0.4 + 0.1 + 0.06
        assert_eq!(gates, vec![false, true, true]);
        assert!((value - 0.56).abs() < 1e-12);
    }

    #[test]
    fn optimum_additive_matches_knapsack_oracle() {
        let values = [0.05, 0.02, 0.04, 0.03, 0.01];
        let costs = [0.4, 0.1, 0.3, 0.25, 0.05];
        let o = SyntheticOracle::new(OracleSpec::additive(0.5, values.iter().map(|&v| curve(v)).collect(), 0.0, 1))
            .unwrap();
        let t = TrainingState::uniform(5, 1e6);
        let (gates, value) = o.optimum(&t, &costs, 0.6).unwrap();
        let bf = brute_force_optimum(&values, &costs, &[true; 5], 0.6).unwrap();
        assert_eq!(gates, bf.gates);
        assert!((value - 0.5 - bf.total_score).abs() < 1e-12);

        let harmful = SyntheticOracle::new(OracleSpec::additive(0.5, vec![curve(-0.1), curve(0.0)], 0.0, 1)).unwrap();
        let (gates, value) = harmful.optimum(&TrainingState::uniform(2, 1e6), &[0.1, 0.1], 1.0).unwrap();
        assert_eq!(gates, vec![false, false]);
        assert_eq!(value, 0.5);
        let big = SyntheticOracle::new(OracleSpec::additive(0.5, vec![curve(0.1); 21], 0.0, 1)).unwrap();
        assert!(matches!(
            big.optimum(&TrainingState::new(21), &[0.1; 21], 1.0),
            Err(OracleError::TooLarge { .. })
        ));
    }

    #[test]
    fn submodular_within_groups() {
        let spec = OracleSpec {
            base_score: 0.2,
            units: vec![curve(0.05), curve(0.08), curve(0.03), curve(0.06), curve(0.04)],
            drift: 0.0,
            noise_sd: 0.0,
            groups: vec![
                RedundancyGroup { members: vec![0, 1, 2], gamma: 0.6 },
                RedundancyGroup { members: vec![3, 4], gamma: 0.4 },
            ],
            warm_start: 0.0,
            seed: 5,
        };
        let o = SyntheticOracle::new(spec).unwrap();
        let t = TrainingState::uniform(5, 250.0);
        let gain = |set: u32, i: usize| {
            let g: Vec<bool> = (0..5).map(|j| set >> j & 1 == 1).collect();
            let mut with = g.clone();
            with[i] = true;
            o.value(&t, &with).unwrap() - o.value(&t, &g).unwrap()
        };
        for b in 0u32..32 {
            for a in 0u32..32 {
                if a & !b != 0 {
                    continue;
                }
                for i in (0..5).filter(|&i| b >> i & 1 == 0) {
                    assert!(gain(a, i) >= gain(b, i) - 1e-12, "A={a:b} B={b:b} i={i}");
                }
            }
        }
    }

    #[test]
    fn learning_is_monotone() {
        let space = SpaceConfig::reference().build(&InitialGates::AllInactive).unwrap();
        let mut spec = SyntheticParams { seed: 4, ..Default::default() }.generate(&space);
        for u in &mut spec.units {
            u.asymptote = u.asymptote.abs();
        }
        let o = SyntheticOracle::new(spec).unwrap();
        let gates: Vec<bool> = (0..space.len()).map(|i| i % 5 == 0).collect();
        let mut prev = f64::NEG_INFINITY;
        for steps in [0.0, 10.0, 100.0, 400.0, 2000.0, 1e5] {
            let v = o.value(&TrainingState::uniform(space.len(), steps), &gates).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn noise_variance_calibrated() {
        let sigma = 0.05;
        let o = SyntheticOracle::new(OracleSpec::additive(0.5, vec![curve(0.0)], sigma, 11)).unwrap();
        let t = TrainingState::new(1);
        let draws: Vec<f64> = (0..10_000).map(|k| o.evaluate(&t, &[true], k).unwrap()).collect();
        let var = stats::sample_variance(&draws);
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "variance ratio {}", var / (sigma * sigma));
        let scaled = o.clone().with_noise_scale(0.5);
        assert_eq!(scaled.noise_sd(), 0.025);
    }

    #[test]
    fn drift_is_bounded_per_phase() {
        let mut spec = OracleSpec::additive(0.5, vec![curve(0.1); 4], 0.0, 2);
        spec.drift = 0.01;
        let o = SyntheticOracle::new(spec).unwrap();
        for i in 0..4 {
            for clock in 0..200 {
                let d = o.unit_utility(i, 300.0, clock + 1) - o.unit_utility(i, 300.0, clock);
                assert!(d.abs() <= 0.01 + 1e-15);
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = OracleSpec::additive(0.5, vec![curve(0.1); 2], 0.0, 1);
        s.groups[1].members = vec![0];
        assert!(SyntheticOracle::new(s.clone()).is_err());
        s.groups = vec![RedundancyGroup { members: vec![0, 1], gamma: 0.0 }];
        assert!(SyntheticOracle::new(s.clone()).is_err());
        s.groups[0].gamma = 1.0;
        assert!(SyntheticOracle::new(s.clone()).is_ok());
        s.base_score = 1.5;
        assert!(SyntheticOracle::new(s).is_err());
        let json = serde_json::to_string(&OracleSpec::additive(0.5, vec![curve(0.1)], 0.01, 1)).unwrap();
        assert!(OracleSpec::from_json(&json).is_ok());
        assert!(OracleSpec::from_json("{}").is_err());
    }

    #[test]
    fn generated_spec_is_valid_and_grouped_by_site() {
        let space = SpaceConfig::reference().build(&InitialGates::AllInactive).unwrap();
        let spec = SyntheticParams { seed: 1, ..Default::default() }.generate(&space);
        spec.validate().unwrap();
        assert_eq!(spec.units.len(), 74);
        // two layers x three slots
        assert_eq!(spec.groups.len(), 6);
        assert!(spec.units.iter().any(|u| u.asymptote < 0.0));
        assert!(spec.units.iter().any(|u| u.asymptote > 0.0));
        assert_eq!(spec, SyntheticParams { seed: 1, ..Default::default() }.generate(&space));
    }
}

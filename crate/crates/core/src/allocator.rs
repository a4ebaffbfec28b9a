//! Budgeted selection of units.
//!
//! During the loop a density-greedy fill proposes a configuration and a
//! hysteresis filter vetoes replacements whose gain does not clear a margin.
//! At the end a guard-free re-solve (greedy or best singleton, whichever is
//! better, followed by best-improvement single swaps) picks the final set.
//! [`brute_force_optimum`] is the exhaustive reference used by tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

/// Relative slack allowed when comparing a summed cost against the budget.
pub const BUDGET_TOLERANCE: f64 = 1e-12;

/// Largest eligible set [`brute_force_optimum`] will enumerate.
pub const BRUTE_FORCE_CAP: usize = 20;

const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AllocError {
    #[error("vector lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("unit {unit} has non-positive cost {cost}")]
    NonPositiveCost { unit: usize, cost: f64 },
    #[error("{eligible} eligible units exceed the enumeration cap of {cap}")]
    TooLarge { eligible: usize, cap: usize },
    #[error("invalid allocator parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocatorParams {
    /// Budget as a fraction of backbone parameters.
    pub budget: f64,
    /// Minimum gain a replacement must show to displace an active unit.
    pub mu_eff: f64,
}

impl Default for AllocatorParams {
    fn default() -> Self {
        Self { budget: 0.002, mu_eff: 0.02 }
    }
}

impl AllocatorParams {
    pub fn validate(&self, costs: &[f64]) -> Result<(), AllocError> {
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(AllocError::InvalidParams(format!("budget {} outside (0, 1]", self.budget)));
        }
        if !(self.mu_eff >= 0.0 && self.mu_eff.is_finite()) {
            return Err(AllocError::InvalidParams(format!("mu_eff {} is negative", self.mu_eff)));
        }
        if let Some((unit, &cost)) = costs.iter().enumerate().find(|(_, &c)| c.is_nan() || c <= 0.0) {
            return Err(AllocError::NonPositiveCost { unit, cost });
        }
        Ok(())
    }

    /// Whether at least one unit fits the budget on its own.
    pub fn affords_any(&self, costs: &[f64]) -> bool {
        costs.iter().any(|&c| within_budget(c, self.budget))
    }
}

pub fn within_budget(total_cost: f64, budget: f64) -> bool {
    total_cost <= budget * (1.0 + BUDGET_TOLERANCE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProposal {
    pub gates: Vec<bool>,
    pub total_cost: f64,
    pub total_score: f64,
}

impl AllocationProposal {
    pub fn from_gates(gates: Vec<bool>, scores: &[f64], costs: &[f64]) -> Self {
        let (total_cost, total_score) = totals(&gates, scores, costs);
        Self { gates, total_cost, total_score }
    }

    pub fn selected(&self) -> Vec<usize> {
        self.gates.iter().enumerate().filter(|(_, &g)| g).map(|(i, _)| i).collect()
    }
}

/// Summed cost and score of the gated units, accumulated in id order.
pub fn totals(gates: &[bool], scores: &[f64], costs: &[f64]) -> (f64, f64) {
    gates
        .iter()
        .zip(scores.iter().zip(costs))
        .filter(|(&g, _)| g)
        .fold((0.0, 0.0), |(c, s), (_, (&r, &ci))| (c + ci, s + r))
}

fn check_inputs(scores: &[f64], costs: &[f64], eligible: &[bool]) -> Result<(), AllocError> {
    if scores.len() != costs.len() || scores.len() != eligible.len() {
        return Err(AllocError::LengthMismatch(format!(
            "{} scores, {} costs, {} eligibility flags",
            scores.len(),
            costs.len(),
            eligible.len()
        )));
    }
    if let Some((unit, &cost)) = costs.iter().enumerate().find(|(_, &c)| c.is_nan() || c <= 0.0) {
        return Err(AllocError::NonPositiveCost { unit, cost });
    }
    Ok(())
}

/// Eligible positive-score units in greedy order: density descending, then
/// cheaper first, then lower id.
fn density_order(scores: &[f64], costs: &[f64], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.filter(|&i| scores[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        (scores[b] / costs[b])
            .total_cmp(&(scores[a] / costs[a]))
            .then(costs[a].total_cmp(&costs[b]))
            .then(a.cmp(&b))
    });
    order
}

pub fn greedy_allocate(
    scores: &[f64],
    costs: &[f64],
    eligible: &[bool],
    budget: f64,
) -> Result<AllocationProposal, AllocError> {
    check_inputs(scores, costs, eligible)?;
    let mut gates = vec![false; scores.len()];
    let mut used = 0.0;
    for i in density_order(scores, costs, (0..scores.len()).filter(|&i| eligible[i])) {
        if within_budget(used + costs[i], budget) {
            gates[i] = true;
            used += costs[i];
        }
    }
    Ok(AllocationProposal::from_gates(gates, scores, costs))
}

/// Filters a proposal against the current gates.
///
/// Newcomers that fit beside every currently active unit are activated as is.
/// A newcomer that only fits by evicting units the proposal drops is adopted
/// only if its score beats the evicted scores by more than `mu_eff`; otherwise
/// the evicted units stay and the newcomer is discarded. Dropped units with a
/// non-positive score are switched off. A dropped unit with a positive score
/// only leaves to make room for an accepted replacement.
pub fn apply_hysteresis(
    current: &[bool],
    proposal: &AllocationProposal,
    scores: &[f64],
    costs: &[f64],
    budget: f64,
    mu_eff: f64,
) -> Result<Vec<bool>, AllocError> {
    let n = current.len();
    if proposal.gates.len() != n || scores.len() != n || costs.len() != n {
        return Err(AllocError::LengthMismatch(format!(
            "{n} current gates, {} proposed, {} scores, {} costs",
            proposal.gates.len(),
            scores.len(),
            costs.len()
        )));
    }
    let mut out = current.to_vec();
    let mut used: f64 = (0..n).filter(|&i| out[i]).map(|i| costs[i]).sum();
    let mut protected = vec![false; n];

    let mut dropped: Vec<usize> = (0..n).filter(|&i| current[i] && !proposal.gates[i]).collect();
    dropped.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));

    let newcomers = density_order(scores, costs, (0..n).filter(|&i| proposal.gates[i] && !current[i]));
    for k in newcomers {
        if within_budget(used + costs[k], budget) {
            out[k] = true;
            used += costs[k];
            continue;
        }
        let mut victims = Vec::new();
        let mut freed = 0.0;
        for &j in dropped.iter().filter(|&&j| out[j] && !protected[j]) {
            victims.push(j);
            freed += costs[j];
            if within_budget(used - freed + costs[k], budget) {
                break;
            }
        }
        if !within_budget(used - freed + costs[k], budget) {
            continue;
        }
        let displaced: f64 = victims.iter().map(|&j| scores[j]).sum();
        if scores[k] - displaced > mu_eff {
            for &j in &victims {
                out[j] = false;
                used -= costs[j];
            }
            out[k] = true;
            used += costs[k];
        } else {
            for &j in &victims {
                protected[j] = true;
            }
        }
    }

    for &j in &dropped {
        if out[j] && !protected[j] && scores[j] <= 0.0 {
            out[j] = false;
        }
    }
    Ok(out)
}

fn best_singleton(scores: &[f64], costs: &[f64], eligible: &[bool], budget: f64) -> Option<usize> {
    (0..scores.len())
        .filter(|&i| eligible[i] && scores[i] > 0.0 && within_budget(costs[i], budget))
        .min_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then(costs[a].total_cmp(&costs[b]))
                .then(a.cmp(&b))
        })
}

/// Guard-free final selection.
pub fn final_resolve(
    scores: &[f64],
    costs: &[f64],
    eligible: &[bool],
    budget: f64,
) -> Result<AllocationProposal, AllocError> {
    let greedy = greedy_allocate(scores, costs, eligible, budget)?;
    let mut gates = greedy.gates.clone();
    if let Some(s) = best_singleton(scores, costs, eligible, budget) {
        if scores[s] > greedy.total_score {
            gates = vec![false; scores.len()];
            gates[s] = true;
        }
    }

    loop {
        let (used, _) = totals(&gates, scores, costs);
        let mut best: Option<(f64, usize, usize)> = None;
        for s in (0..gates.len()).filter(|&i| gates[i]) {
            for u in (0..gates.len()).filter(|&i| !gates[i] && eligible[i]) {
                let gain = scores[u] - scores[s];
                if gain <= GAIN_EPS || !within_budget(used - costs[s] + costs[u], budget) {
                    continue;
                }
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, s, u));
                }
            }
        }
        match best {
            Some((_, s, u)) => {
                gates[s] = false;
                gates[u] = true;
            }
            None => break,
        }
    }
    Ok(AllocationProposal::from_gates(gates, scores, costs))
}

#[derive(Clone, Copy)]
struct Candidate {
    mask: u32,
    cost: f64,
    score: f64,
}

/// Higher score wins, then lower cost, then the lexicographically smaller gate
/// vector (the mask whose lowest differing unit is off).
fn better(a: Candidate, b: Candidate) -> Candidate {
    let ord = a
        .score
        .total_cmp(&b.score)
        .then(b.cost.total_cmp(&a.cost))
        .then_with(|| {
            let diff = a.mask ^ b.mask;
            if diff == 0 {
                Ordering::Equal
            } else if a.mask & (diff & diff.wrapping_neg()) == 0 {
                Ordering::Greater
            } else {
                Ordering::Less
            }
        });
    if ord == Ordering::Less {
        b
    } else {
        a
    }
}

/// Exact knapsack optimum by enumeration over the eligible units.
pub fn brute_force_optimum(
    scores: &[f64],
    costs: &[f64],
    eligible: &[bool],
    budget: f64,
) -> Result<AllocationProposal, AllocError> {
    check_inputs(scores, costs, eligible)?;
    let ids: Vec<usize> = (0..scores.len()).filter(|&i| eligible[i]).collect();
    if ids.len() > BRUTE_FORCE_CAP {
        return Err(AllocError::TooLarge { eligible: ids.len(), cap: BRUTE_FORCE_CAP });
    }
    let eval = |mask: u32| -> Option<Candidate> {
        let (mut cost, mut score) = (0.0, 0.0);
        for (bit, &i) in ids.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                cost += costs[i];
                score += scores[i];
            }
        }
        within_budget(cost, budget).then_some(Candidate { mask, cost, score })
    };
    let empty = Candidate { mask: 0, cost: 0.0, score: 0.0 };
    let total: u32 = 1 << ids.len();
    let best = if ids.len() >= 14 {
        (0..total)
            .into_par_iter()
            .filter_map(eval)
            .reduce(|| empty, better)
    } else {
        (0..total).filter_map(eval).fold(empty, better)
    };

    let mut gates = vec![false; scores.len()];
    for (bit, &i) in ids.iter().enumerate() {
        gates[i] = best.mask >> bit & 1 == 1;
    }
    Ok(AllocationProposal::from_gates(gates, scores, costs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MILLI: f64 = 1e-3;

    fn scaled(c: &[f64]) -> Vec<f64> {
        c.iter().map(|v| v * MILLI).collect()
    }

    #[test]
    fn greedy_tie_breaks_on_cost() {
        let (r, c) = ([9.0, 6.0, 5.0], scaled(&[3.0, 2.0, 2.0]));
        let e = [true; 3];
        let g = greedy_allocate(&r, &c, &e, 4.0 * MILLI).unwrap();
        assert_eq!(g.selected(), vec![1, 2]);
        assert_eq!(g.total_score, 11.0);
        assert!((g.total_cost - 4.0 * MILLI).abs() < 1e-15);
        let bf = brute_force_optimum(&r, &c, &e, 4.0 * MILLI).unwrap();
        assert_eq!(bf.selected(), vec![1, 2]);
    }

    #[test]
    fn greedy_skips_non_positive_scores() {
        let g = greedy_allocate(&[-1.0, -2.0], &[0.1, 0.1], &[true, true], 1.0).unwrap();
        assert!(g.selected().is_empty());
        let g = greedy_allocate(&[5.0], &[0.3], &[true], 0.3).unwrap();
        assert_eq!(g.selected(), vec![0]);
        let g = greedy_allocate(&[5.0, 4.0], &[0.3, 0.1], &[false, true], 1.0).unwrap();
        assert_eq!(g.selected(), vec![1]);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            greedy_allocate(&[1.0], &[0.1, 0.2], &[true], 1.0),
            Err(AllocError::LengthMismatch(_))
        ));
        assert_eq!(
            final_resolve(&[1.0, 2.0], &[0.1, 0.0], &[true, true], 1.0),
            Err(AllocError::NonPositiveCost { unit: 1, cost: 0.0 })
        );
        let many = vec![1.0; 21];
        assert_eq!(
            brute_force_optimum(&many, &many, &[true; 21], 1.0),
            Err(AllocError::TooLarge { eligible: 21, cap: 20 })
        );
    }

    #[test]
    fn params_validation() {
        let costs = [0.001, 0.003];
        assert!(AllocatorParams::default().validate(&costs).is_ok());
        let tight = AllocatorParams { budget: 0.0005, ..Default::default() };
        assert!(tight.validate(&costs).is_ok());
        assert!(!tight.affords_any(&costs));
        assert!(AllocatorParams::default().affords_any(&costs));
        assert!(AllocatorParams::default().validate(&[0.001, 0.0]).is_err());
        assert!(AllocatorParams { mu_eff: -1.0, ..Default::default() }.validate(&costs).is_err());
        assert!(AllocatorParams { budget: 1.5, ..Default::default() }.validate(&costs).is_err());
    }

    #[test]
    fn final_resolve_swaps_into_optimum() {
        let (r, c) = ([8.0, 9.0], scaled(&[4.0, 5.0]));
        let e = [true; 2];
        assert_eq!(greedy_allocate(&r, &c, &e, 5.0 * MILLI).unwrap().selected(), vec![0]);
        let f = final_resolve(&r, &c, &e, 5.0 * MILLI).unwrap();
        assert_eq!(f.selected(), vec![1]);
        assert_eq!(f, brute_force_optimum(&r, &c, &e, 5.0 * MILLI).unwrap());
    }

    #[test]
    fn final_resolve_keeps_greedy_optimum() {
        let (r, c) = ([10.0, 6.0, 6.0], scaled(&[5.0, 3.0, 3.0]));
        let e = [true; 3];
        let g = greedy_allocate(&r, &c, &e, 6.0 * MILLI).unwrap();
        let f = final_resolve(&r, &c, &e, 6.0 * MILLI).unwrap();
        assert_eq!(g, f);
        assert_eq!(f.selected(), vec![1, 2]);
        assert_eq!(f.total_score, 12.0);
        assert_eq!(f, brute_force_optimum(&r, &c, &e, 6.0 * MILLI).unwrap());
    }

    #[test]
    fn final_resolve_prefers_singleton_over_weak_greedy() {
        // greedy grabs the dense cheap unit and cannot afford the big one
        let r = [1.0, 10.0];
        let c = [0.01, 0.1];
        let f = final_resolve(&r, &c, &[true; 2], 0.1).unwrap();
        assert_eq!(f.selected(), vec![1]);
    }

    #[test]
    fn brute_force_degenerate_cases() {
        let bf = brute_force_optimum(&[-1.0, 0.0, -3.0], &[0.1; 3], &[true; 3], 1.0).unwrap();
        assert!(bf.selected().is_empty());
        assert_eq!(bf.total_score, 0.0);
        let bf = brute_force_optimum(&[1.0, 2.0], &[0.5, 0.6], &[true; 2], 0.4).unwrap();
        assert!(bf.selected().is_empty());
    }

    #[test]
    fn brute_force_tie_breaks() {
        // equal score: cheaper set wins
        let bf = brute_force_optimum(&[2.0, 1.0, 1.0], &[0.3, 0.1, 0.1], &[true; 3], 1.0).unwrap();
        assert_eq!(bf.selected(), vec![0, 1, 2]);
        let bf = brute_force_optimum(&[2.0, 2.0], &[0.3, 0.2], &[true; 2], 0.3).unwrap();
        assert_eq!(bf.selected(), vec![1]);
        // equal score and cost: lexicographically smaller gate vector
        let bf = brute_force_optimum(&[2.0, 2.0], &[0.3, 0.3], &[true; 2], 0.3).unwrap();
        assert_eq!(bf.selected(), vec![1]);
    }

    #[test]
    fn hysteresis_threshold() {
        let scores = [0.50, 0.52];
        let costs = [1.0, 1.0];
        let current = [true, false];
        let proposal = AllocationProposal::from_gates(vec![false, true], &scores, &costs);
        assert_eq!(apply_hysteresis(&current, &proposal, &scores, &costs, 1.0, 0.05).unwrap(), vec![true, false]);
        let scores = [0.50, 0.56];
        let proposal = AllocationProposal::from_gates(vec![false, true], &scores, &costs);
        assert_eq!(apply_hysteresis(&current, &proposal, &scores, &costs, 1.0, 0.05).unwrap(), vec![false, true]);
    }

    #[test]
    fn hysteresis_zero_margin_passes_improving_proposal() {
        let scores = [0.50, 0.52, 0.3, -0.1];
        let costs = [1.0, 1.0, 0.5, 0.5];
        let current = [true, false, false, true];
        let proposal = greedy_allocate(&scores, &costs, &[true; 4], 1.5).unwrap();
        let out = apply_hysteresis(&current, &proposal, &scores, &costs, 1.5, 0.0).unwrap();
        assert_eq!(out, proposal.gates);
    }

    #[test]
    fn hysteresis_pure_moves_pass() {
        let scores = [0.5, 0.4, -0.2];
        let costs = [0.1, 0.1, 0.1];
        let current = [false, false, true];
        let proposal = AllocationProposal::from_gates(vec![true, true, false], &scores, &costs);
        let out = apply_hysteresis(&current, &proposal, &scores, &costs, 1.0, 10.0).unwrap();
        assert_eq!(out, vec![true, true, false]);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(-0.2f64..1.0, n),
                prop::collection::vec(-3.0f64..0.0, n),
                0.05f64..1.0,
            )
                .prop_map(|(r, lc, frac)| {
                    let c: Vec<f64> = lc.iter().map(|v| 10f64.powf(*v)).collect();
                    let b = frac * c.iter().sum::<f64>();
                    (r, c, b)
                })
        })
    }

    proptest! {
        #[test]
        fn every_operation_respects_budget((r, c, b) in instance(), cur_seed in any::<u64>()) {
            let e = vec![true; r.len()];
            for p in [
                greedy_allocate(&r, &c, &e, b).unwrap(),
                final_resolve(&r, &c, &e, b).unwrap(),
                brute_force_optimum(&r, &c, &e, b).unwrap(),
            ] {
                prop_assert!(within_budget(p.total_cost, b));
            }
            // a feasible current set: greedy over a scrambled score vector
            let scrambled: Vec<f64> = (0..r.len()).map(|i| ((cur_seed >> (i % 60)) & 7) as f64 + 0.5).collect();
            let current = greedy_allocate(&scrambled, &c, &e, b).unwrap().gates;
            let proposal = greedy_allocate(&r, &c, &e, b).unwrap();
            for mu in [0.0, 0.05, 1.0] {
                let out = apply_hysteresis(&current, &proposal, &r, &c, b, mu).unwrap();
                let (cost, score) = totals(&out, &r, &c);
                prop_assert!(within_budget(cost, b));
                if mu == 0.0 {
                    let (_, kept) = totals(&current, &r, &c);
                    prop_assert!(score >= kept - 1e-12);
                }
            }
        }

        #[test]
        fn half_approximation((r, c, b) in instance()) {
            let e = vec![true; r.len()];
            let f = final_resolve(&r, &c, &e, b).unwrap();
            let bf = brute_force_optimum(&r, &c, &e, b).unwrap();
            prop_assert!(f.total_score >= 0.5 * bf.total_score - 1e-12);
            prop_assert!(f.total_score <= bf.total_score + 1e-12);
        }

        #[test]
        fn budget_monotonicity((r, c, b) in instance(), extra in 0.0f64..0.5) {
            let e = vec![true; r.len()];
            let lo = final_resolve(&r, &c, &e, b).unwrap();
            let hi = final_resolve(&r, &c, &e, b + extra).unwrap();
            prop_assert!(hi.total_score >= lo.total_score - 1e-12);
        }

        #[test]
        fn selection_invariant_under_score_scaling((r, c, b) in instance(), t in 0.01f64..100.0) {
            let e = vec![true; r.len()];
            let rt: Vec<f64> = r.iter().map(|v| v * t).collect();
            prop_assert_eq!(greedy_allocate(&r, &c, &e, b).unwrap().gates, greedy_allocate(&rt, &c, &e, b).unwrap().gates);
            prop_assert_eq!(final_resolve(&r, &c, &e, b).unwrap().gates, final_resolve(&rt, &c, &e, b).unwrap().gates);
        }
    }

    #[test]
    fn parallel_and_serial_enumeration_agree() {
        let n = 16;
        let r: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64) / 10.0).collect();
        let c: Vec<f64> = (0..n).map(|i| 0.01 + ((i * 13 % 7) as f64) / 100.0).collect();
        let e = vec![true; n];
        let par = brute_force_optimum(&r, &c, &e, 0.2).unwrap();
        // serial fold over every mask
        let serial = {
            let ids: Vec<usize> = (0..n).collect();
            let mut best = Candidate { mask: 0, cost: 0.0, score: 0.0 };
            for mask in 0u32..(1 << n) {
                let (mut cost, mut score) = (0.0, 0.0);
                for (bit, &i) in ids.iter().enumerate() {
                    if mask >> bit & 1 == 1 {
                        cost += c[i];
                        score += r[i];
                    }
                }
                if within_budget(cost, 0.2) {
                    best = better(best, Candidate { mask, cost, score });
                }
            }
            best.mask
        };
        let par_mask: u32 = par.gates.iter().enumerate().map(|(i, &g)| (g as u32) << i).sum();
        assert_eq!(par_mask, serial);
    }
}

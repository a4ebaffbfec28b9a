//! Vote-counting stabilizer for configuration changes.
//!
//! A unit's gate (or size) changes only after the allocator has proposed the
//! same change on `tau` consecutive cycles. Any inconsistent proposal resets the
//! count. In addition, two committing cycles are always at least `tau_act`
//! cycles apart; a unit that collects enough votes inside that window holds at
//! `tau - 1` and commits on its next consistent vote once the window has passed.
//! Together these give at most `floor(T / tau_act)` committing cycles in `T`.

use crate::allocator::within_budget;
use crate::space::AuditSpace;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FsmError {
    #[error("vector lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("unit {unit} has no sibling of size {size}")]
    UnknownSibling { unit: usize, size: u32 },
    #[error("invalid thresholds: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsmParams {
    pub tau_act: u32,
    pub tau_rank: u32,
}

impl Default for FsmParams {
    fn default() -> Self {
        Self { tau_act: 3, tau_rank: 3 }
    }
}

impl FsmParams {
    pub fn validate(&self) -> Result<(), FsmError> {
        if self.tau_act == 0 || self.tau_rank == 0 {
            return Err(FsmError::InvalidParams("thresholds must be at least 1".into()));
        }
        Ok(())
    }

    /// Upper bound on committing cycles over `cycles` cycles.
    pub fn chatter_bound(&self, cycles: u64) -> u64 {
        cycles / u64::from(self.tau_act)
    }
}

/// Scores and costs used to trim simultaneous activations that together
/// overrun the budget. Activations are admitted in descending `score / cost`.
#[derive(Debug, Clone, Copy)]
pub struct BudgetCheck<'a> {
    pub scores: &'a [f64],
    pub costs: &'a [f64],
    pub budget: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub unit: usize,
    pub counter: u32,
    pub pending: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankVote {
    pub unit: usize,
    pub counter: u32,
    pub pending_size: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsmOutcome {
    pub gates: Vec<bool>,
    pub commits: Vec<usize>,
    /// Units whose commit was refused by the budget re-check.
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankOutcome {
    pub gates: Vec<bool>,
    /// (previously active unit, sibling that replaced it)
    pub commits: Vec<(usize, usize)>,
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsmState {
    params: FsmParams,
    act_votes: Vec<u32>,
    act_pending: Vec<Option<bool>>,
    rank_votes: Vec<u32>,
    rank_pending: Vec<Option<u32>>,
    flips: Vec<u64>,
    change_cycles: u64,
    cycle: u64,
    last_commit: Option<u64>,
    committed_this_cycle: bool,
}

impl FsmState {
    pub fn new(n_units: usize, params: FsmParams) -> Self {
        Self {
            params,
            act_votes: vec![0; n_units],
            act_pending: vec![None; n_units],
            rank_votes: vec![0; n_units],
            rank_pending: vec![None; n_units],
            flips: vec![0; n_units],
            change_cycles: 0,
            cycle: 0,
            last_commit: None,
            committed_this_cycle: false,
        }
    }

    pub fn params(&self) -> FsmParams {
        self.params
    }

    /// Cycles in which at least one committed gate changed.
    pub fn change_cycles(&self) -> u64 {
        self.change_cycles
    }

    /// Committed gate flips per unit.
    pub fn flips(&self) -> &[u64] {
        &self.flips
    }

    /// Cycles completed so far.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn activity_counter(&self, unit: usize) -> u32 {
        self.act_votes[unit]
    }

    pub fn votes(&self) -> Vec<Vote> {
        (0..self.act_votes.len())
            .filter_map(|unit| {
                let pending = self.act_pending[unit]?;
                Some(Vote { unit, counter: self.act_votes[unit], pending })
            })
            .collect()
    }

    pub fn rank_votes(&self) -> Vec<RankVote> {
        (0..self.rank_votes.len())
            .filter_map(|unit| {
                let pending_size = self.rank_pending[unit]?;
                Some(RankVote { unit, counter: self.rank_votes[unit], pending_size })
            })
            .collect()
    }

    fn commit_allowed(&self) -> bool {
        let tau = u64::from(self.params.tau_act);
        match self.last_commit {
            None => self.cycle + 1 >= tau,
            Some(last) => last == self.cycle || self.cycle - last >= tau,
        }
    }

    fn mark_commit(&mut self) {
        self.last_commit = Some(self.cycle);
        self.committed_this_cycle = true;
    }

    fn reset_activity(&mut self, unit: usize) {
        self.act_votes[unit] = 0;
        self.act_pending[unit] = None;
    }

    fn reset_rank(&mut self, unit: usize) {
        self.rank_votes[unit] = 0;
        self.rank_pending[unit] = None;
    }

    /// Registers this cycle's activity proposals and returns the committed gates.
    /// Completes the cycle.
    pub fn filter_proposals(
        &mut self,
        current: &[bool],
        proposed: &[bool],
        budget: Option<BudgetCheck<'_>>,
    ) -> Result<FsmOutcome, FsmError> {
        let n = self.act_votes.len();
        if current.len() != n || proposed.len() != n {
            return Err(FsmError::LengthMismatch(format!(
                "state tracks {n} units, got {} current and {} proposed",
                current.len(),
                proposed.len()
            )));
        }
        if let Some(b) = &budget {
            if b.scores.len() != n || b.costs.len() != n {
                return Err(FsmError::LengthMismatch("budget vectors".into()));
            }
        }
        let tau = self.params.tau_act;
        let allowed = self.commit_allowed();
        let mut ready = Vec::new();
        for i in 0..n {
            if proposed[i] == current[i] {
                self.reset_activity(i);
                continue;
            }
            if self.act_pending[i] == Some(proposed[i]) {
                self.act_votes[i] += 1;
            } else {
                self.act_pending[i] = Some(proposed[i]);
                self.act_votes[i] = 1;
            }
            if self.act_votes[i] >= tau {
                if allowed {
                    ready.push(i);
                } else {
                    self.act_votes[i] = tau - 1;
                }
            }
        }

        let mut gates = current.to_vec();
        let mut outcome = FsmOutcome::default();
        let (off, mut on): (Vec<usize>, Vec<usize>) = ready.into_iter().partition(|&i| current[i]);
        for &i in &off {
            gates[i] = false;
        }
        match budget {
            Some(b) => {
                on.sort_by(|&x, &y| {
                    (b.scores[y] / b.costs[y])
                        .total_cmp(&(b.scores[x] / b.costs[x]))
                        .then(b.costs[x].total_cmp(&b.costs[y]))
                        .then(x.cmp(&y))
                });
                let mut used: f64 = (0..n).filter(|&i| gates[i]).map(|i| b.costs[i]).sum();
                for &i in &on {
                    if within_budget(used + b.costs[i], b.budget) {
                        gates[i] = true;
                        used += b.costs[i];
                    } else {
                        outcome.rejected.push(i);
                    }
                }
            }
            None => on.iter().for_each(|&i| gates[i] = true),
        }

        for i in 0..n {
            if gates[i] != current[i] {
                outcome.commits.push(i);
                self.flips[i] += 1;
            }
        }
        for &i in outcome.commits.iter().chain(&outcome.rejected) {
            self.reset_activity(i);
        }
        outcome.rejected.sort_unstable();
        if !outcome.commits.is_empty() {
            self.mark_commit();
        }
        if self.committed_this_cycle {
            self.change_cycles += 1;
        }
        self.committed_this_cycle = false;
        self.cycle += 1;
        outcome.gates = gates;
        Ok(outcome)
    }

    /// Registers size-change proposals for active units within the current
    /// cycle. `proposed[i] = Some(size)` asks to move active unit `i` to its
    /// sibling of that size. Call before [`FsmState::filter_proposals`].
    pub fn filter_rank_proposals(
        &mut self,
        space: &AuditSpace,
        current: &[bool],
        proposed: &[Option<u32>],
        budget: BudgetCheck<'_>,
    ) -> Result<RankOutcome, FsmError> {
        let n = self.rank_votes.len();
        if current.len() != n || proposed.len() != n || space.len() != n || budget.costs.len() != n {
            return Err(FsmError::LengthMismatch(format!(
                "state tracks {n} units, got {} current, {} proposed, {} in space",
                current.len(),
                proposed.len(),
                space.len()
            )));
        }
        let tau = self.params.tau_rank;
        let allowed = self.commit_allowed();
        let mut targets = vec![None; n];
        for i in 0..n {
            let size = match proposed[i] {
                Some(s) if current[i] && s != space.units[i].kind.size => s,
                _ => {
                    self.reset_rank(i);
                    continue;
                }
            };
            let sibling = space.sibling(i, size).ok_or(FsmError::UnknownSibling { unit: i, size })?;
            targets[i] = Some(sibling);
            if self.rank_pending[i] == Some(size) {
                self.rank_votes[i] += 1;
            } else {
                self.rank_pending[i] = Some(size);
                self.rank_votes[i] = 1;
            }
        }

        let mut gates = current.to_vec();
        let mut outcome = RankOutcome::default();
        let mut used: f64 = (0..n).filter(|&i| gates[i]).map(|i| budget.costs[i]).sum();
        for i in 0..n {
            let Some(sibling) = targets[i] else { continue };
            if self.rank_votes[i] < tau {
                continue;
            }
            if !allowed {
                self.rank_votes[i] = tau - 1;
                continue;
            }
            let next = used - budget.costs[i] + budget.costs[sibling];
            if gates[i] && !gates[sibling] && within_budget(next, budget.budget) {
                gates[i] = false;
                gates[sibling] = true;
                used = next;
                self.flips[i] += 1;
                self.flips[sibling] += 1;
                outcome.commits.push((i, sibling));
                self.reset_activity(sibling);
            } else {
                outcome.rejected.push(i);
            }
            self.reset_rank(i);
            self.reset_activity(i);
        }
        if !outcome.commits.is_empty() {
            self.mark_commit();
        }
        outcome.gates = gates;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{InitialGates, SpaceConfig};

    fn fsm(n: usize, tau: u32) -> FsmState {
        FsmState::new(n, FsmParams { tau_act: tau, tau_rank: tau })
    }

    /// Feeds a single unit's proposals and returns the gate after each cycle.
    fn drive(tau: u32, proposals: &[bool]) -> (Vec<bool>, FsmState) {
        let mut state = fsm(1, tau);
        let mut gate = false;
        let mut trace = Vec::new();
        for &p in proposals {
            gate = state.filter_proposals(&[gate], &[p], None).unwrap().gates[0];
            trace.push(gate);
        }
        (trace, state)
    }

    #[test]
    fn commits_after_tau_consistent_votes() {
        let (trace, state) = drive(2, &[true, true]);
        assert_eq!(trace, vec![false, true]);
        assert_eq!(state.change_cycles(), 1);
        assert_eq!(state.activity_counter(0), 0);
    }

    #[test]
    fn inconsistent_vote_resets() {
        let (trace, state) = drive(2, &[true, false, true]);
        assert_eq!(trace, vec![false; 3]);
        assert_eq!(state.change_cycles(), 0);
        assert_eq!(state.activity_counter(0), 1);
    }

    #[test]
    fn threshold_one_is_identity() {
        let proposals = [true, false, false, true, true, false];
        let (trace, state) = drive(1, &proposals);
        assert_eq!(trace, proposals.to_vec());
        assert_eq!(state.change_cycles(), 4);
    }

    #[test]
    fn length_mismatch() {
        let mut s = fsm(2, 2);
        assert!(matches!(s.filter_proposals(&[true], &[true, false], None), Err(FsmError::LengthMismatch(_))));
    }

    #[test]
    fn cooldown_spaces_out_commits_across_units() {
        // unit 1 starts voting one cycle after unit 0; its commit waits out the window
        let mut s = fsm(2, 3);
        let mut gates = vec![false, false];
        let proposals = [[true, false], [true, true], [true, true], [true, true], [true, true], [true, true]];
        let mut commit_cycles = Vec::new();
        for (t, p) in proposals.iter().enumerate() {
            let out = s.filter_proposals(&gates, p, None).unwrap();
            if !out.commits.is_empty() {
                commit_cycles.push((t, out.commits.clone()));
            }
            gates = out.gates;
            for i in 0..2 {
                assert!(s.activity_counter(i) < 3);
            }
        }
        assert_eq!(commit_cycles, vec![(2, vec![0]), (5, vec![1])]);
        assert_eq!(s.change_cycles(), 2);
    }

    #[test]
    fn budget_recheck_keeps_densest_commits() {
        let mut s = fsm(3, 1);
        let scores = [1.0, 3.0, 2.0];
        let costs = [1.0, 1.0, 1.0];
        let check = BudgetCheck { scores: &scores, costs: &costs, budget: 2.0 };
        let out = s.filter_proposals(&[false; 3], &[true; 3], Some(check)).unwrap();
        assert_eq!(out.gates, vec![false, true, true]);
        assert_eq!(out.rejected, vec![0]);
        assert_eq!(s.activity_counter(0), 0);
    }

    fn rank_fixture() -> (AuditSpace, usize, usize, usize) {
        let space = SpaceConfig::reference().build(&InitialGates::AllInactive).unwrap();
        // attention LoRA SA ranks 2, 4, 8, 16 occupy ids 0..4
        (space, 1, 2, 3)
    }

    #[test]
    fn rank_commit_swaps_sibling() {
        let (space, r4, r8, _) = rank_fixture();
        let costs = space.costs();
        let scores = vec![1.0; space.len()];
        let check = BudgetCheck { scores: &scores, costs: &costs, budget: 0.002 };
        let mut s = FsmState::new(space.len(), FsmParams { tau_act: 2, tau_rank: 2 });
        let mut gates = vec![false; space.len()];
        gates[r4] = true;
        let mut proposed = vec![None; space.len()];
        proposed[r4] = Some(8);
        let out = s.filter_rank_proposals(&space, &gates, &proposed, check).unwrap();
        assert!(out.commits.is_empty());
        s.filter_proposals(&out.gates, &out.gates, None).unwrap();
        let out = s.filter_rank_proposals(&space, &gates, &proposed, check).unwrap();
        assert_eq!(out.commits, vec![(r4, r8)]);
        assert!(out.gates[r8] && !out.gates[r4]);
        s.filter_proposals(&out.gates, &out.gates, None).unwrap();
        assert_eq!(s.change_cycles(), 1);
    }

    #[test]
    fn alternating_rank_proposals_never_commit() {
        let (space, r4, _, _) = rank_fixture();
        let costs = space.costs();
        let scores = vec![1.0; space.len()];
        let check = BudgetCheck { scores: &scores, costs: &costs, budget: 0.002 };
        let mut s = FsmState::new(space.len(), FsmParams { tau_act: 2, tau_rank: 2 });
        let mut gates = vec![false; space.len()];
        gates[r4] = true;
        for size in [8, 16, 8] {
            let mut proposed = vec![None; space.len()];
            proposed[r4] = Some(size);
            let out = s.filter_rank_proposals(&space, &gates, &proposed, check).unwrap();
            assert!(out.commits.is_empty());
            gates = s.filter_proposals(&out.gates, &out.gates, None).unwrap().gates;
        }
        assert_eq!(s.change_cycles(), 0);
    }

    #[test]
    fn rank_commit_over_budget_is_rejected() {
        let (space, r4, _, r16) = rank_fixture();
        let costs = space.costs();
        let scores = vec![1.0; space.len()];
        let budget = costs[r4] * 1.5;
        let check = BudgetCheck { scores: &scores, costs: &costs, budget };
        let mut s = FsmState::new(space.len(), FsmParams { tau_act: 1, tau_rank: 1 });
        let mut gates = vec![false; space.len()];
        gates[r4] = true;
        let mut proposed = vec![None; space.len()];
        proposed[r4] = Some(16);
        let out = s.filter_rank_proposals(&space, &gates, &proposed, check).unwrap();
        assert!(out.commits.is_empty());
        assert_eq!(out.rejected, vec![r4]);
        assert!(out.gates[r4] && !out.gates[r16]);
        assert!(s.rank_votes().is_empty());
    }

    #[test]
    fn unknown_sibling() {
        let (space, r4, _, _) = rank_fixture();
        let costs = space.costs();
        let scores = vec![1.0; space.len()];
        let check = BudgetCheck { scores: &scores, costs: &costs, budget: 0.002 };
        let mut s = FsmState::new(space.len(), FsmParams::default());
        let mut gates = vec![false; space.len()];
        gates[r4] = true;
        let mut proposed = vec![None; space.len()];
        proposed[r4] = Some(32);
        assert_eq!(
            s.filter_rank_proposals(&space, &gates, &proposed, check),
            Err(FsmError::UnknownSibling { unit: r4, size: 32 })
        );
    }
}

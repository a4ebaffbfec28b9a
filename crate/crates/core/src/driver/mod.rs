//! The two-phase protocol: cycles of search, audit and allocate, then a
//! guard-free re-solve and a from-scratch training run of the selection.

mod baseline;
mod config;
mod diagnostics;
mod events;

pub use baseline::{random_fill, run_random_baseline};
pub use config::{total_steps_for_shots, OracleSource, RunConfig};
pub use diagnostics::{compute_diagnostics, diagnostics_from_jsonl, Diagnostics, CSV_HEADER};
pub use events::{
    AllocateEvent, AuditEvent, CycleEvent, EventLog, FinalEvent, FsmEvent, GatesDelta, LogRecord,
    Measurement, RunHeader, SearchEvent,
};

use crate::allocator::{self, within_budget, AllocError, AllocationProposal};
use crate::fsm::{BudgetCheck, FsmError, FsmState};
use crate::oracle::{EvalOracle, OracleError, SyntheticOracle, TrainingState};
use crate::rng::{self, tag};
use crate::sampler::{self, SamplerError};
use crate::space::{AuditSpace, InitialGates, SpaceError};
use crate::tracker::{TrackerError, UtilityTracker};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Fsm(#[from] FsmError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error("malformed event log at line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
    #[error("cycle {cycle} committed cost {cost} over budget {budget}")]
    BudgetViolation { cycle: u64, cost: f64, budget: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Environment variable capping internal parallelism; 0 means serial.
pub const THREADS_ENV: &str = "SEA_ALLOC_THREADS";

/// Internal parallelism. Results never depend on it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecOptions {
    /// Worker threads for audit evaluations; 0 runs serially.
    pub threads: usize,
}

impl ExecOptions {
    pub fn serial() -> Self {
        Self { threads: 0 }
    }

    /// One worker per available core.
    pub fn max_parallel() -> Self {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self { threads }
    }

    /// Reads [`THREADS_ENV`]; unset or unparsable means one worker per core.
    pub fn from_env() -> Self {
        match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()) {
            Some(threads) => Self { threads },
            None => Self::max_parallel(),
        }
    }

    /// Runs `f` inside a pool of the configured size.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match rayon::ThreadPoolBuilder::new().num_threads(self.threads.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
}

/// Final artifact of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub final_gates: Vec<bool>,
    pub selected: Vec<usize>,
    /// Noise-free score of the selection after re-training from scratch.
    pub final_score: f64,
    /// Sum of the selection's estimated gains.
    pub estimated_score: f64,
    pub budget_used: f64,
    pub budget: f64,
    #[serde(rename = "T_c")]
    pub change_cycles: u64,
    pub chatter_bound: u64,
    pub probe_counts: Vec<u64>,
    /// Per-cycle noise-free score of the committed configuration.
    pub values: Vec<f64>,
    /// Per-cycle gap to the best feasible configuration; empty when it is unknown.
    pub regret: Vec<f64>,
    pub evaluations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_log: Option<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub log: EventLog,
}

/// Builds the audit space with the configured initial gates.
pub fn build_space(config: &RunConfig) -> Result<AuditSpace, DriverError> {
    let initial = if config.initial_active.is_empty() {
        InitialGates::AllInactive
    } else {
        InitialGates::Active(config.initial_active.clone())
    };
    Ok(config.space.build(&initial)?)
}

/// Synthetic oracle for `config` over `space`, with noise scaled by shots.
pub fn build_oracle(config: &RunConfig, space: &AuditSpace) -> Result<SyntheticOracle, DriverError> {
    let spec = match &config.oracle {
        OracleSource::Synthetic(params) => params.generate(space),
        OracleSource::Spec(spec) => spec.clone(),
    };
    if spec.units.len() != space.len() {
        return Err(DriverError::Config(format!(
            "oracle spec has {} units, audit space has {}",
            spec.units.len(),
            space.len()
        )));
    }
    Ok(SyntheticOracle::new(spec)?.with_noise_scale(config.noise_scale()))
}

/// Raw audit utilities for `batch`.
///
/// One evaluation of the current configuration is shared by the batch; each
/// unit is then evaluated with its gate toggled. An active unit yields
/// `(full - without) / c`, an inactive one `(with - full) / c`. Call `j` uses
/// noise index `call_indices[j]`, index 0 being the shared evaluation.
/// Returns the shared score and, per batch entry, the toggled score and utility.
pub fn audit_utilities<O: EvalOracle>(
    oracle: &O,
    training: &TrainingState,
    gates: &[bool],
    costs: &[f64],
    batch: &[usize],
    call_indices: &[u64],
    parallel: bool,
) -> Result<(f64, Vec<(f64, f64)>), OracleError> {
    assert_eq!(call_indices.len(), batch.len() + 1, "one call index per evaluation");
    let full = oracle.evaluate(training, gates, call_indices[0])?;
    let toggle = |(j, &i): (usize, &usize)| -> Result<(f64, f64), OracleError> {
        let mut g = gates.to_vec();
        g[i] = !g[i];
        let toggled = oracle.evaluate(training, &g, call_indices[j + 1])?;
        let gain = if gates[i] { full - toggled } else { toggled - full };
        Ok((toggled, gain / costs[i]))
    };
    let per_unit = if parallel {
        batch.par_iter().enumerate().map(toggle).collect::<Result<Vec<_>, _>>()?
    } else {
        batch.iter().enumerate().map(toggle).collect::<Result<Vec<_>, _>>()?
    };
    Ok((full, per_unit))
}

/// One run of the search-audit-allocate loop.
pub struct Engine<O> {
    config: RunConfig,
    space: AuditSpace,
    oracle: O,
    costs: Vec<f64>,
    gates: Vec<bool>,
    training: TrainingState,
    trackers: Vec<UtilityTracker>,
    fsm: FsmState,
    parallel: bool,
    evaluations: u64,
    log: EventLog,
}

impl<O: EvalOracle> Engine<O> {
    pub fn new(config: &RunConfig, space: AuditSpace, oracle: O, exec: ExecOptions) -> Result<Self, DriverError> {
        config.validate()?;
        let n = space.len();
        if oracle.num_units() != n {
            return Err(DriverError::Config(format!(
                "oracle scores {} units, audit space has {n}",
                oracle.num_units()
            )));
        }
        let costs = space.costs();
        config.sampler.validate(n).map_err(|e| DriverError::Config(e.to_string()))?;
        config.allocator.validate(&costs).map_err(|e| DriverError::Config(e.to_string()))?;
        let gates = space.initial_gates();
        let used = space.total_cost(&gates);
        if !within_budget(used, config.allocator.budget) {
            return Err(DriverError::Config(format!(
                "initial configuration costs {used}, budget is {}",
                config.allocator.budget
            )));
        }
        let header = RunHeader {
            n_units: n,
            costs: costs.clone(),
            budget: config.allocator.budget,
            cycles: config.cycles,
            steps_per_cycle: config.steps_per_cycle(),
            refinetune_steps: config.refinetune_steps(),
            shots: config.shots,
            seed: config.seed,
            batch_size: config.sampler.batch_size,
            epsilon: config.sampler.epsilon,
            tau_act: config.fsm.tau_act,
            optimum_value: None,
        };
        Ok(Self {
            trackers: (0..n).map(|i| UtilityTracker::new(i, config.smoothing.window)).collect(),
            fsm: FsmState::new(n, config.fsm),
            training: TrainingState::new(n),
            config: config.clone(),
            space,
            oracle,
            costs,
            gates,
            parallel: exec.threads > 0,
            evaluations: 0,
            log: EventLog { header, cycles: Vec::new(), final_event: None },
        })
    }

    /// Sets the comparator for regret: the value of the best feasible configuration.
    pub fn with_optimum(mut self, value: f64) -> Self {
        self.log.header.optimum_value = Some(value);
        self
    }

    pub fn space(&self) -> &AuditSpace {
        &self.space
    }

    pub fn oracle(&self) -> &O {
        &self.oracle
    }

    pub fn gates(&self) -> &[bool] {
        &self.gates
    }

    pub fn training(&self) -> &TrainingState {
        &self.training
    }

    pub fn trackers(&self) -> &[UtilityTracker] {
        &self.trackers
    }

    pub fn fsm(&self) -> &FsmState {
        &self.fsm
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn cycle(&self) -> u64 {
        self.log.cycles.len() as u64
    }

    pub fn probe_counts(&self) -> Vec<u64> {
        self.trackers.iter().map(UtilityTracker::probe_count).collect()
    }

    /// Estimated gain per unit in score units: robust score times cost, or
    /// `None` before the first audit.
    pub fn estimated_gains(&self) -> Vec<Option<f64>> {
        self.trackers
            .iter()
            .zip(&self.costs)
            .map(|(t, &c)| t.score(&self.config.smoothing).map(|r| r * c))
            .collect()
    }

    fn call_indices(&self, cycle: u64, count: usize) -> Vec<u64> {
        (0..count as u64)
            .map(|slot| rng::derive_seed(&[tag::EVAL_NOISE, self.config.seed, cycle, slot]))
            .collect()
    }

    /// Executes one search, audit and allocate cycle.
    pub fn run_cycle(&mut self) -> Result<&CycleEvent, DriverError> {
        let cycle = self.cycle();
        let n = self.space.len();
        let k = self.config.steps_per_cycle();
        let budget = self.config.allocator.budget;

        // search
        self.training.train_step(&self.gates, k)?;
        let search = SearchEvent { steps: k, trained_units: self.gates.iter().filter(|&&g| g).count() };

        // audit
        let mut sampler_rng = rng::stream(&[tag::SAMPLER, self.config.seed, cycle]);
        let audit_batch =
            sampler::sample_audit_batch(&self.gates, &self.probe_counts(), &self.config.sampler, &mut sampler_rng)?;
        let calls = self.call_indices(cycle, audit_batch.batch.len() + 1);
        let (full_score, utilities) = audit_utilities(
            &self.oracle,
            &self.training,
            &self.gates,
            &self.costs,
            &audit_batch.batch,
            &calls,
            self.parallel,
        )?;
        self.evaluations += calls.len() as u64;
        let mut measurements = Vec::with_capacity(audit_batch.batch.len());
        for (&i, &(toggled_score, u_raw)) in audit_batch.batch.iter().zip(&utilities) {
            let tracker = &mut self.trackers[i];
            let ema = tracker.record_audit(u_raw, &self.config.smoothing, cycle)?;
            measurements.push(Measurement {
                cycle,
                unit_id: i,
                was_active: self.gates[i],
                toggled_score,
                u_raw,
                ema,
                score: tracker.robust_score(&self.config.smoothing)?,
                probe_count: tracker.probe_count(),
            });
        }
        let audit = AuditEvent {
            batch: audit_batch.batch,
            exploration_slots: audit_batch.exploration_slots,
            full_score,
            measurements,
        };

        // allocate
        let gains = self.estimated_gains();
        let eligible: Vec<bool> = gains.iter().map(Option::is_some).collect();
        let values: Vec<f64> = gains.iter().map(|g| g.unwrap_or(0.0)).collect();
        // Active units that were never audited keep their gate: the greedy pass
        // runs on the remaining budget and the proposal carries them unchanged.
        let pinned: Vec<bool> = (0..n).map(|i| self.gates[i] && !eligible[i]).collect();
        let pinned_cost: f64 = (0..n).filter(|&i| pinned[i]).map(|i| self.costs[i]).sum();
        let mut proposal =
            allocator::greedy_allocate(&values, &self.costs, &eligible, (budget - pinned_cost).max(0.0))?;
        for i in (0..n).filter(|&i| pinned[i]) {
            proposal.gates[i] = true;
        }
        let proposal = AllocationProposal::from_gates(proposal.gates, &values, &self.costs);
        let accepted = allocator::apply_hysteresis(
            &self.gates,
            &proposal,
            &values,
            &self.costs,
            budget,
            self.config.allocator.mu_eff,
        )?;

        // A size change inside one sibling family goes through the rank counter.
        let mut activity = accepted.clone();
        let mut rank_proposals = vec![None; n];
        let mut paired = vec![false; n];
        for i in (0..n).filter(|&i| self.gates[i] && !accepted[i]) {
            let key = self.space.units[i].sibling_key();
            let partner = (0..n).find(|&j| {
                !self.gates[j] && accepted[j] && !paired[j] && self.space.units[j].sibling_key() == key
            });
            if let Some(j) = partner {
                paired[j] = true;
                rank_proposals[i] = Some(self.space.units[j].kind.size);
                activity[i] = true;
                activity[j] = false;
            }
        }
        let check = BudgetCheck { scores: &values, costs: &self.costs, budget };
        let ranked = self.fsm.filter_rank_proposals(&self.space, &self.gates, &rank_proposals, check)?;
        for &(from, to) in &ranked.commits {
            activity[from] = false;
            activity[to] = true;
        }
        let outcome = self.fsm.filter_proposals(&ranked.gates, &activity, Some(check))?;

        let previous = std::mem::replace(&mut self.gates, outcome.gates);
        let budget_used = self.space.total_cost(&self.gates);
        if !within_budget(budget_used, budget) {
            return Err(DriverError::BudgetViolation { cycle, cost: budget_used, budget });
        }
        let (total_cost, total_score) = allocator::totals(&self.gates, &values, &self.costs);
        let mut rejected = ranked.rejected;
        rejected.extend(outcome.rejected);
        let value = self.oracle.true_value(&self.training, &self.gates);

        self.log.cycles.push(CycleEvent {
            cycle,
            search,
            audit,
            allocate: AllocateEvent {
                proposed_gates_delta: GatesDelta::between(&previous, &proposal.gates),
                accepted_gates_delta: GatesDelta::between(&previous, &accepted),
                total_cost,
                total_score,
            },
            fsm: FsmEvent {
                votes: self.fsm.votes(),
                rank_votes: self.fsm.rank_votes(),
                commits: outcome.commits,
                rank_commits: ranked.commits,
                rejected,
                change_cycles: self.fsm.change_cycles(),
            },
            active: (0..n).filter(|&i| self.gates[i]).collect(),
            budget_used,
            value,
            evaluations: self.evaluations,
        });
        Ok(self.log.cycles.last().expect("cycle just pushed"))
    }

    /// Guard-free re-solve over every audited unit, then re-training of the
    /// selection from scratch.
    pub fn finish(mut self) -> Result<RunOutput, DriverError> {
        let budget = self.config.allocator.budget;
        let gains = self.estimated_gains();
        let eligible: Vec<bool> = gains.iter().map(Option::is_some).collect();
        let values: Vec<f64> = gains.iter().map(|g| g.unwrap_or(0.0)).collect();
        let selection = allocator::final_resolve(&values, &self.costs, &eligible, budget)?;
        let final_score = refinetune_value(
            &self.oracle,
            &selection.gates,
            self.config.refinetune_steps(),
            rng::derive_seed(&[tag::EVAL_NOISE, self.config.seed, u64::MAX]),
        )?;
        let budget_used = self.space.total_cost(&selection.gates);
        if !within_budget(budget_used, budget) {
            return Err(DriverError::BudgetViolation { cycle: self.cycle(), cost: budget_used, budget });
        }
        let selected = selection.selected();
        self.log.final_event = Some(FinalEvent {
            selected: selected.clone(),
            total_cost: budget_used,
            estimated_score: selection.total_score,
            final_value: Some(final_score),
        });
        let values_curve: Vec<f64> = self.log.cycles.iter().filter_map(|c| c.value).collect();
        let regret = match self.log.header.optimum_value {
            Some(opt) if values_curve.len() == self.log.cycles.len() => {
                values_curve.iter().map(|v| opt - v).collect()
            }
            _ => Vec::new(),
        };
        let report = RunReport {
            final_gates: selection.gates,
            selected,
            final_score,
            estimated_score: selection.total_score,
            budget_used,
            budget,
            change_cycles: self.fsm.change_cycles(),
            chatter_bound: self.config.fsm.chatter_bound(self.cycle()),
            probe_counts: self.probe_counts(),
            values: values_curve,
            regret,
            evaluations: self.evaluations,
            event_log: None,
        };
        Ok(RunOutput { report, log: self.log })
    }
}

/// Score of `gates` after training only those units for `steps` from scratch.
/// Noise-free when the oracle knows the true value; otherwise one evaluation
/// with noise index `call_index`.
pub fn refinetune_value<O: EvalOracle>(
    oracle: &O,
    gates: &[bool],
    steps: u64,
    call_index: u64,
) -> Result<f64, OracleError> {
    let mut training = TrainingState::new(gates.len());
    training.train_step(gates, steps)?;
    match oracle.true_value(&training, gates) {
        Some(v) => Ok(v),
        None => oracle.evaluate(&training, gates, call_index),
    }
}

/// Runs every cycle and the final phase with `oracle`.
pub fn run_with_oracle<O: EvalOracle>(
    config: &RunConfig,
    space: AuditSpace,
    oracle: O,
    exec: ExecOptions,
) -> Result<RunOutput, DriverError> {
    exec.install(|| {
        let mut engine = Engine::new(config, space, oracle, exec)?;
        for _ in 0..config.cycles {
            engine.run_cycle()?;
        }
        engine.finish()
    })
}

/// Runs `config` against its synthetic oracle. Regret is tracked when the audit
/// space is small enough to enumerate.
pub fn run_full_with(config: &RunConfig, exec: ExecOptions) -> Result<RunOutput, DriverError> {
    let space = build_space(config)?;
    let oracle = build_oracle(config, &space)?;
    exec.install(|| {
        let optimum = if space.len() <= allocator::BRUTE_FORCE_CAP {
            let horizon = TrainingState::uniform(space.len(), (config.cycles * config.steps_per_cycle()) as f64);
            Some(oracle.optimum(&horizon, &space.costs(), config.allocator.budget)?.1)
        } else {
            None
        };
        let mut engine = Engine::new(config, space, oracle, exec)?;
        if let Some(v) = optimum {
            engine = engine.with_optimum(v);
        }
        for _ in 0..config.cycles {
            engine.run_cycle()?;
        }
        engine.finish()
    })
}

pub fn run_full(config: &RunConfig) -> Result<RunOutput, DriverError> {
    run_full_with(config, ExecOptions::serial())
}

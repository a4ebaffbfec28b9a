//! Evaluation environments that map a gate vector to a validation score in [0, 1].

mod replay;
mod synthetic;

pub use replay::{
    gates_from_bits, gates_to_bits, training_fingerprint, RecordingOracle, ReplayOracle, TraceRecord,
};
pub use synthetic::{
    OracleSpec, RedundancyGroup, SyntheticOracle, SyntheticParams, UnitCurve, DRIFT_PERIOD,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("gate vector has {got} entries, oracle has {expected} units")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unit {0} is not active")]
    InactiveUnit(usize),
    #[error("{units} units exceed the enumeration cap of {cap}")]
    TooLarge { units: usize, cap: usize },
    #[error("training step count must be at least 1")]
    ZeroSteps,
    #[error("invalid oracle spec: {0}")]
    InvalidSpec(String),
    #[error("malformed trace at line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
    #[error("configuration {0} was never recorded")]
    UnknownConfiguration(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Accumulated training per unit plus a clock counting training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub steps: Vec<f64>,
    pub clock: u64,
}

impl TrainingState {
    pub fn new(n_units: usize) -> Self {
        Self { steps: vec![0.0; n_units], clock: 0 }
    }

    /// Every unit trained for `steps`.
    pub fn uniform(n_units: usize, steps: f64) -> Self {
        Self { steps: vec![steps; n_units], clock: 0 }
    }

    /// Adds `k` steps to every active unit.
    pub fn train_step(&mut self, gates: &[bool], k: u64) -> Result<(), OracleError> {
        if k == 0 {
            return Err(OracleError::ZeroSteps);
        }
        if gates.len() != self.steps.len() {
            return Err(OracleError::LengthMismatch { expected: self.steps.len(), got: gates.len() });
        }
        for (s, _) in self.steps.iter_mut().zip(gates).filter(|(_, &g)| g) {
            *s += k as f64;
        }
        self.clock += 1;
        Ok(())
    }
}

/// Anything that can score a configuration.
///
/// `evaluate` must be a pure function of its arguments so that audit
/// evaluations can run in any order or in parallel; `call_index` keys the
/// noise stream.
pub trait EvalOracle: Send + Sync {
    fn num_units(&self) -> usize;

    fn evaluate(&self, training: &TrainingState, gates: &[bool], call_index: u64) -> Result<f64, OracleError>;

    /// Noise-free score, when the oracle knows it.
    fn true_value(&self, training: &TrainingState, gates: &[bool]) -> Option<f64>;
}

impl<O: EvalOracle + ?Sized> EvalOracle for &O {
    fn num_units(&self) -> usize {
        (**self).num_units()
    }

    fn evaluate(&self, training: &TrainingState, gates: &[bool], call_index: u64) -> Result<f64, OracleError> {
        (**self).evaluate(training, gates, call_index)
    }

    fn true_value(&self, training: &TrainingState, gates: &[bool]) -> Option<f64> {
        (**self).true_value(training, gates)
    }
}

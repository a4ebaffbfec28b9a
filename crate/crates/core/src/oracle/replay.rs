//! Recorded evaluation traces: JSONL records `{gates, score, noise_seed}`,
//! where `gates` is a '0'/'1' string indexed by unit id.
//!
//! Noisy evaluations are keyed by their call index. Noise-free values, when the
//! recorded oracle knows them, are keyed by [`training_fingerprint`] instead.

use super::{EvalOracle, OracleError, TrainingState};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub gates: String,
    pub score: f64,
    pub noise_seed: u64,
}

pub fn gates_to_bits(gates: &[bool]) -> String {
    gates.iter().map(|&g| if g { '1' } else { '0' }).collect()
}

pub fn gates_from_bits(bits: &str) -> Option<Vec<bool>> {
    bits.chars()
        .map(|c| match c {
            '0' => Some(false),
            '1' => Some(true),
            _ => None,
        })
        .collect()
}

/// Key for a noise-free value recorded under `training`.
pub fn training_fingerprint(training: &TrainingState) -> u64 {
    let mut parts = Vec::with_capacity(training.steps.len() + 2);
    parts.push(rng::tag::TRUE_VALUE);
    parts.push(training.clock);
    parts.extend(training.steps.iter().map(|s| s.to_bits()));
    rng::derive_seed(&parts)
}

/// Looks up scores by `(gates, noise_seed)`. A gate vector recorded under a
/// different seed falls back to its first recorded score.
#[derive(Debug, Clone)]
pub struct ReplayOracle {
    n_units: usize,
    exact: HashMap<(String, u64), f64>,
    first: HashMap<String, f64>,
}

impl ReplayOracle {
    pub fn from_records(records: impl IntoIterator<Item = TraceRecord>) -> Result<Self, OracleError> {
        let mut n_units = None;
        let mut exact = HashMap::new();
        let mut first = HashMap::new();
        for (line, r) in records.into_iter().enumerate() {
            let line = line + 1;
            if gates_from_bits(&r.gates).is_none() {
                return Err(OracleError::MalformedTrace { line, reason: "gates must be a 0/1 string".into() });
            }
            if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
                return Err(OracleError::MalformedTrace { line, reason: format!("score {}", r.score) });
            }
            match n_units {
                None => n_units = Some(r.gates.len()),
                Some(n) if n != r.gates.len() => {
                    return Err(OracleError::MalformedTrace {
                        line,
                        reason: format!("{} gates, earlier records have {n}", r.gates.len()),
                    })
                }
                Some(_) => {}
            }
            first.entry(r.gates.clone()).or_insert(r.score);
            exact.insert((r.gates, r.noise_seed), r.score);
        }
        let n_units = n_units.ok_or(OracleError::MalformedTrace { line: 0, reason: "empty trace".into() })?;
        Ok(Self { n_units, exact, first })
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, OracleError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TraceRecord = serde_json::from_str(&line)
                .map_err(|e| OracleError::MalformedTrace { line: i + 1, reason: e.to_string() })?;
            records.push(r);
        }
        Self::from_records(records)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, OracleError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn len(&self) -> usize {
        self.exact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exact.is_empty()
    }
}

impl EvalOracle for ReplayOracle {
    fn num_units(&self) -> usize {
        self.n_units
    }

    fn evaluate(&self, _training: &TrainingState, gates: &[bool], call_index: u64) -> Result<f64, OracleError> {
        if gates.len() != self.n_units {
            return Err(OracleError::LengthMismatch { expected: self.n_units, got: gates.len() });
        }
        let bits = gates_to_bits(gates);
        if let Some(&s) = self.exact.get(&(bits.clone(), call_index)) {
            return Ok(s);
        }
        self.first.get(&bits).copied().ok_or(OracleError::UnknownConfiguration(bits))
    }

    fn true_value(&self, training: &TrainingState, gates: &[bool]) -> Option<f64> {
        self.exact.get(&(gates_to_bits(gates), training_fingerprint(training))).copied()
    }
}

/// Wraps an oracle and records every evaluation it answers.
#[derive(Debug)]
pub struct RecordingOracle<O> {
    inner: O,
    records: Mutex<Vec<TraceRecord>>,
}

impl<O: EvalOracle> RecordingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, records: Mutex::new(Vec::new()) }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    /// Records ordered by call index, independent of evaluation order.
    pub fn records(&self) -> Vec<TraceRecord> {
        let mut r = self.records.lock().expect("trace lock").clone();
        r.sort_by(|a, b| a.noise_seed.cmp(&b.noise_seed).then_with(|| a.gates.cmp(&b.gates)));
        r.dedup();
        r
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl<O: EvalOracle> EvalOracle for RecordingOracle<O> {
    fn num_units(&self) -> usize {
        self.inner.num_units()
    }

    fn evaluate(&self, training: &TrainingState, gates: &[bool], call_index: u64) -> Result<f64, OracleError> {
        let score = self.inner.evaluate(training, gates, call_index)?;
        self.records.lock().expect("trace lock").push(TraceRecord {
            gates: gates_to_bits(gates),
            score,
            noise_seed: call_index,
        });
        Ok(score)
    }

    fn true_value(&self, training: &TrainingState, gates: &[bool]) -> Option<f64> {
        let score = self.inner.true_value(training, gates)?;
        self.records.lock().expect("trace lock").push(TraceRecord {
            gates: gates_to_bits(gates),
            score,
            noise_seed: training_fingerprint(training),
        });
        Some(score)
    }
}

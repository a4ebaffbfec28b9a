//! Summaries recomputed from an event log.

use super::{DriverError, EventLog};
use serde::{Deserialize, Serialize};
use std::fmt::Write;

pub const CSV_HEADER: &str = "cycle,value,regret,t_c,coverage_min";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleDiagnostics {
    pub cycle: u64,
    pub value: Option<f64>,
    pub regret: Option<f64>,
    pub t_c: u64,
    /// Smallest probe count over all units after this cycle.
    pub coverage_min: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub probe_counts: Vec<u64>,
    pub t_c: u64,
    pub regret: Vec<Option<f64>>,
    pub evaluations: u64,
    pub cycles: Vec<CycleDiagnostics>,
}

pub fn compute_diagnostics(log: &EventLog) -> Result<Diagnostics, DriverError> {
    let n = log.header.n_units;
    let mut probes = vec![0u64; n];
    let mut evaluations = 0;
    let mut cycles = Vec::with_capacity(log.cycles.len());
    for c in &log.cycles {
        for m in &c.audit.measurements {
            let slot = probes.get_mut(m.unit_id).ok_or_else(|| DriverError::MalformedLog {
                line: c.cycle as usize + 2,
                reason: format!("unit {} out of range", m.unit_id),
            })?;
            *slot += 1;
        }
        evaluations += 1 + c.audit.batch.len() as u64;
        let regret = match (log.header.optimum_value, c.value) {
            (Some(opt), Some(v)) => Some(opt - v),
            _ => None,
        };
        cycles.push(CycleDiagnostics {
            cycle: c.cycle,
            value: c.value,
            regret,
            t_c: c.fsm.change_cycles,
            coverage_min: probes.iter().copied().min().unwrap_or(0),
        });
    }
    Ok(Diagnostics {
        probe_counts: probes,
        t_c: log.cycles.last().map_or(0, |c| c.fsm.change_cycles),
        regret: cycles.iter().map(|c| c.regret).collect(),
        evaluations,
        cycles,
    })
}

pub fn diagnostics_from_jsonl(text: &str) -> Result<Diagnostics, DriverError> {
    compute_diagnostics(&EventLog::from_jsonl(text)?)
}

impl Diagnostics {
    /// One row per cycle under [`CSV_HEADER`]; unknown values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.cycles {
            let _ = writeln!(out, "{},{},{},{},{}", c.cycle, opt(c.value), opt(c.regret), c.t_c, c.coverage_min);
        }
        out
    }
}

//! The per-run JSONL event log: one header line, one line per cycle, one final line.

use super::DriverError;
use crate::fsm::{RankVote, Vote};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub n_units: usize,
    pub costs: Vec<f64>,
    pub budget: f64,
    pub cycles: u64,
    pub steps_per_cycle: u64,
    pub refinetune_steps: u64,
    pub shots: u32,
    pub seed: u64,
    pub batch_size: usize,
    pub epsilon: f64,
    pub tau_act: u32,
    /// Value of the best feasible configuration, when it can be enumerated.
    pub optimum_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub steps: u64,
    pub trained_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub cycle: u64,
    pub unit_id: usize,
    /// Whether the unit was active (toggled off) or inactive (toggled on).
    pub was_active: bool,
    pub toggled_score: f64,
    pub u_raw: f64,
    pub ema: f64,
    pub score: f64,
    pub probe_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub batch: Vec<usize>,
    pub exploration_slots: Vec<usize>,
    pub full_score: f64,
    pub measurements: Vec<Measurement>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatesDelta {
    pub on: Vec<usize>,
    pub off: Vec<usize>,
}

impl GatesDelta {
    pub fn between(from: &[bool], to: &[bool]) -> Self {
        let mut d = Self::default();
        for (i, (&a, &b)) in from.iter().zip(to).enumerate() {
            match (a, b) {
                (false, true) => d.on.push(i),
                (true, false) => d.off.push(i),
                _ => {}
            }
        }
        d
    }

    pub fn is_empty(&self) -> bool {
        self.on.is_empty() && self.off.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocateEvent {
    pub proposed_gates_delta: GatesDelta,
    pub accepted_gates_delta: GatesDelta,
    /// Estimated cost and value of the accepted configuration.
    pub total_cost: f64,
    pub total_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsmEvent {
    pub votes: Vec<Vote>,
    pub rank_votes: Vec<RankVote>,
    pub commits: Vec<usize>,
    pub rank_commits: Vec<(usize, usize)>,
    pub rejected: Vec<usize>,
    #[serde(rename = "T_c")]
    pub change_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleEvent {
    pub cycle: u64,
    pub search: SearchEvent,
    pub audit: AuditEvent,
    pub allocate: AllocateEvent,
    pub fsm: FsmEvent,
    pub active: Vec<usize>,
    pub budget_used: f64,
    /// Noise-free score of the committed configuration, when known.
    pub value: Option<f64>,
    pub evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEvent {
    pub selected: Vec<usize>,
    pub total_cost: f64,
    pub estimated_score: f64,
    pub final_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header(RunHeader),
    Cycle(Box<CycleEvent>),
    Final(FinalEvent),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub header: RunHeader,
    pub cycles: Vec<CycleEvent>,
    pub final_event: Option<FinalEvent>,
}

impl EventLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &LogRecord| {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        };
        push(&LogRecord::Header(self.header.clone()));
        for c in &self.cycles {
            push(&LogRecord::Cycle(Box::new(c.clone())));
        }
        if let Some(f) = &self.final_event {
            push(&LogRecord::Final(f.clone()));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DriverError> {
        let mut header = None;
        let mut cycles = Vec::new();
        let mut final_event = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let malformed = |reason: String| DriverError::MalformedLog { line: i + 1, reason };
            let record: LogRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            match record {
                LogRecord::Header(h) if header.is_none() && i == 0 => header = Some(h),
                LogRecord::Header(_) => return Err(malformed("unexpected header".into())),
                LogRecord::Cycle(_) | LogRecord::Final(_) if header.is_none() => {
                    return Err(malformed("log must start with a header".into()))
                }
                LogRecord::Cycle(_) if final_event.is_some() => {
                    return Err(malformed("cycle after final record".into()))
                }
                LogRecord::Cycle(c) => {
                    if c.cycle != cycles.len() as u64 {
                        return Err(malformed(format!("expected cycle {}, found {}", cycles.len(), c.cycle)));
                    }
                    cycles.push(*c);
                }
                LogRecord::Final(_) if final_event.is_some() => {
                    return Err(malformed("duplicate final record".into()))
                }
                LogRecord::Final(f) => final_event = Some(f),
            }
        }
        let header = header.ok_or(DriverError::MalformedLog { line: 0, reason: "empty log".into() })?;
        Ok(Self { header, cycles, final_event })
    }
}

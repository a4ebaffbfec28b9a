//! Audit batch selection: epsilon-exploration toward rarely probed units, then a
//! stratified draw between currently active and inactive units.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler parameters: {0}")]
    InvalidParams(String),
    #[error("gate vector has {gates} entries, probe counts {probes}")]
    LengthMismatch { gates: usize, probes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerParams {
    /// Audit batch size M.
    pub batch_size: usize,
    /// Share of the stratified slots drawn from active units.
    pub active_fraction: f64,
    /// Per-slot probability of an exploration draw.
    pub epsilon: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self { batch_size: 6, active_fraction: 0.3, epsilon: 0.3 }
    }
}

impl SamplerParams {
    pub fn validate(&self, n_units: usize) -> Result<(), SamplerError> {
        if self.batch_size == 0 || self.batch_size > n_units {
            return Err(SamplerError::InvalidParams(format!(
                "batch size {} must lie in [1, {n_units}]",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.active_fraction) {
            return Err(SamplerError::InvalidParams(format!(
                "active fraction {} outside [0, 1]",
                self.active_fraction
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(SamplerError::InvalidParams(format!(
                "epsilon {} outside (0, 1]",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditBatch {
    /// Every sampled unit, exploration draws first.
    pub batch: Vec<usize>,
    /// The subset filled by exploration slots.
    pub exploration_slots: Vec<usize>,
}

/// Splits `k` stratified slots into (active, inactive) targets before spillover.
pub fn stratified_split(k: usize, active_fraction: f64) -> (usize, usize) {
    let active = ((active_fraction * k as f64).round() as usize).min(k);
    (active, k - active)
}

pub fn sample_audit_batch<R: Rng + ?Sized>(
    gates: &[bool],
    probe_counts: &[u64],
    params: &SamplerParams,
    rng: &mut R,
) -> Result<AuditBatch, SamplerError> {
    if gates.len() != probe_counts.len() {
        return Err(SamplerError::LengthMismatch { gates: gates.len(), probes: probe_counts.len() });
    }
    let n = gates.len();
    params.validate(n)?;
    let slots = params.batch_size.min(n);

    let mut chosen = vec![false; n];
    let mut out = AuditBatch::default();
    let mut explored = 0;
    for _ in 0..slots {
        if rng.random_bool(params.epsilon) {
            explored += 1;
        }
    }
    for _ in 0..explored {
        let id = draw_least_probed(probe_counts, &chosen, rng);
        chosen[id] = true;
        out.batch.push(id);
        out.exploration_slots.push(id);
    }

    let rest = sample_stratified(gates, &chosen, slots - explored, params.active_fraction, rng);
    out.batch.extend(rest);
    Ok(out)
}

/// Uniform draw from the least-probed quarter of the units not yet chosen.
/// Ties in probe count order by id.
fn draw_least_probed<R: Rng + ?Sized>(probe_counts: &[u64], chosen: &[bool], rng: &mut R) -> usize {
    let mut open: Vec<usize> = (0..probe_counts.len()).filter(|&i| !chosen[i]).collect();
    open.sort_by_key(|&i| (probe_counts[i], i));
    let quartile = open.len().div_ceil(4).max(1);
    open[rng.random_range(0..quartile)]
}

/// Draws `k` distinct unchosen units, `round(active_fraction * k)` of them from the
/// active stratum and the rest from the inactive one. A short stratum spills its
/// remaining slots over to the other.
pub fn sample_stratified<R: Rng + ?Sized>(
    gates: &[bool],
    chosen: &[bool],
    k: usize,
    active_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let (active, inactive): (Vec<usize>, Vec<usize>) =
        (0..gates.len()).filter(|&i| !chosen[i]).partition(|&i| gates[i]);
    let (want_active, _) = stratified_split(k, active_fraction);
    let mut take_active = want_active.min(active.len());
    let take_inactive = (k - take_active).min(inactive.len());
    take_active = (k - take_inactive).min(active.len());

    let mut out = Vec::with_capacity(take_active + take_inactive);
    out.extend(index::sample(rng, active.len(), take_active).into_iter().map(|j| active[j]));
    out.extend(index::sample(rng, inactive.len(), take_inactive).into_iter().map(|j| inactive[j]));
    out
}

/// Minimum per-cycle audit probability guaranteed by exploration: `epsilon * M / N`.
pub fn coverage_lower_bound(n: usize, m: usize, epsilon: f64) -> Result<f64, SamplerError> {
    if m == 0 || m > n {
        return Err(SamplerError::InvalidParams(format!("need N >= M >= 1, got N={n}, M={m}")));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(SamplerError::InvalidParams(format!("epsilon {epsilon} outside (0, 1]")));
    }
    Ok(epsilon * m as f64 / n as f64)
}

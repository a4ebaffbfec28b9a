//! Per-unit smoothing of noisy audit utilities.
//!
//! Each audit is first folded into an exponential moving average; the last few
//! smoothed values are kept in a short window and summarized as
//! `median - lambda * IQR`, so units whose estimates swing between audits rank
//! below units with the same typical value but a steadier signal.

use crate::stats;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

pub const MIN_WINDOW: usize = 3;
pub const MAX_WINDOW: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("non-finite utility {0}")]
    NonFiniteUtility(f64),
    #[error("unit {0} has never been audited")]
    NeverAudited(usize),
    #[error("invalid smoothing parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingParams {
    /// EMA decay; weight kept on the previous estimate.
    pub beta: f64,
    /// IQR shrinkage weight.
    pub lambda_s: f64,
    /// History length, between 3 and 5.
    pub window: usize,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self { beta: 0.9, lambda_s: 0.5, window: MAX_WINDOW }
    }
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(TrackerError::InvalidParams(format!("beta {} outside (0, 1)", self.beta)));
        }
        if !(self.lambda_s >= 0.0 && self.lambda_s.is_finite()) {
            return Err(TrackerError::InvalidParams(format!("lambda_s {} is negative", self.lambda_s)));
        }
        if !(MIN_WINDOW..=MAX_WINDOW).contains(&self.window) {
            return Err(TrackerError::InvalidParams(format!(
                "window {} outside [{MIN_WINDOW}, {MAX_WINDOW}]",
                self.window
            )));
        }
        Ok(())
    }

    /// Stationary variance of the EMA for unit-free noise variance `sigma2`.
    pub fn ema_variance_bound(&self, sigma2: f64) -> f64 {
        (1.0 - self.beta) * sigma2 / (1.0 + self.beta)
    }

    /// Steady-state lag of the EMA behind a mean drifting by `delta` per audit.
    pub fn ema_drift_bias_bound(&self, delta: f64) -> f64 {
        delta * self.beta / (1.0 - self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityTracker {
    unit_id: usize,
    ema: Option<f64>,
    history: VecDeque<f64>,
    window: usize,
    probe_count: u64,
    last_audit_cycle: Option<u64>,
}

impl UtilityTracker {
    pub fn new(unit_id: usize, window: usize) -> Self {
        Self {
            unit_id,
            ema: None,
            history: VecDeque::with_capacity(window),
            window: window.max(1),
            probe_count: 0,
            last_audit_cycle: None,
        }
    }

    pub fn unit_id(&self) -> usize {
        self.unit_id
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    pub fn history(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    pub fn probe_count(&self) -> u64 {
        self.probe_count
    }

    pub fn last_audit_cycle(&self) -> Option<u64> {
        self.last_audit_cycle
    }

    /// Folds one raw audit utility into the estimate and returns the new EMA.
    /// The first observation seeds the EMA directly.
    pub fn record_audit(
        &mut self,
        u_raw: f64,
        params: &SmoothingParams,
        cycle: u64,
    ) -> Result<f64, TrackerError> {
        if !u_raw.is_finite() {
            return Err(TrackerError::NonFiniteUtility(u_raw));
        }
        let ema = match self.ema {
            None => u_raw,
            Some(prev) => (1.0 - params.beta) * u_raw + params.beta * prev,
        };
        self.ema = Some(ema);
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(ema);
        self.probe_count += 1;
        self.last_audit_cycle = Some(cycle);
        Ok(ema)
    }

    /// `median(history) - lambda_s * IQR(history)`.
    pub fn robust_score(&self, params: &SmoothingParams) -> Result<f64, TrackerError> {
        if self.history.is_empty() {
            return Err(TrackerError::NeverAudited(self.unit_id));
        }
        let mut sorted: Vec<f64> = self.history.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let median = stats::quantile_sorted(&sorted, 0.5);
        let iqr = stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25);
        Ok(median - params.lambda_s * iqr)
    }

    /// Score if audited at least once.
    pub fn score(&self, params: &SmoothingParams) -> Option<f64> {
        self.robust_score(params).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(beta: f64, lambda_s: f64) -> SmoothingParams {
        SmoothingParams { beta, lambda_s, window: 5 }
    }

    #[test]
    fn first_audit_seeds_ema() {
        let mut t = UtilityTracker::new(0, 5);
        assert_eq!(t.record_audit(0.8, &params(0.9, 0.5), 3).unwrap(), 0.8);
        assert_eq!(t.history().collect::<Vec<_>>(), vec![0.8]);
        assert_eq!(t.probe_count(), 1);
        assert_eq!(t.last_audit_cycle(), Some(3));
    }

    #[test]
    fn ema_update() {
        let p = params(0.9, 0.5);
        let mut t = UtilityTracker::new(0, 5);
        t.record_audit(0.5, &p, 0).unwrap();
        let ema = t.record_audit(1.0, &p, 1).unwrap();
        assert!((ema - 0.55).abs() < 1e-12);
    }

    #[test]
    fn window_evicts_oldest() {
        // beta close to zero makes the EMA track raw inputs almost exactly
        let p = SmoothingParams { beta: 1e-300, lambda_s: 0.0, window: 5 };
        let mut t = UtilityTracker::new(0, 5);
        for v in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0] {
            t.record_audit(v, &p, 0).unwrap();
        }
        assert_eq!(t.history().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.probe_count(), 6);
    }

    #[test]
    fn robust_score_examples() {
        let mut t = UtilityTracker::new(0, 5);
        t.history.extend([0.5, 0.7, 0.9]);
        t.probe_count = 3;
        assert!((t.robust_score(&params(0.9, 0.5)).unwrap() - 0.6).abs() < 1e-12);

        let mut one = UtilityTracker::new(1, 5);
        one.record_audit(0.4, &params(0.9, 0.5), 0).unwrap();
        assert_eq!(one.robust_score(&params(0.9, 7.0)).unwrap(), 0.4);

        let mut flat = UtilityTracker::new(2, 5);
        for _ in 0..4 {
            flat.record_audit(0.3, &params(0.9, 0.5), 0).unwrap();
        }
        assert!((flat.robust_score(&params(0.9, 3.0)).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let mut t = UtilityTracker::new(4, 5);
        assert_eq!(t.robust_score(&params(0.9, 0.5)), Err(TrackerError::NeverAudited(4)));
        assert!(matches!(
            t.record_audit(f64::NAN, &params(0.9, 0.5), 0),
            Err(TrackerError::NonFiniteUtility(_))
        ));
        assert!(matches!(
            t.record_audit(f64::INFINITY, &params(0.9, 0.5), 0),
            Err(TrackerError::NonFiniteUtility(_))
        ));
        assert_eq!(t.probe_count(), 0);
    }

    #[test]
    fn param_validation() {
        assert!(SmoothingParams::default().validate().is_ok());
        assert!(params(1.0, 0.5).validate().is_err());
        assert!(params(0.0, 0.5).validate().is_err());
        assert!(params(0.5, -0.1).validate().is_err());
        assert!(SmoothingParams { window: 6, ..Default::default() }.validate().is_err());
        assert!(SmoothingParams { window: 2, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn bounds_arithmetic() {
        let p = params(0.9, 0.5);
        assert!((p.ema_variance_bound(1.0) - 0.1 / 1.9).abs() < 1e-15);
        assert!((p.ema_drift_bias_bound(0.01) - 0.09).abs() < 1e-12);
    }

    fn run(values: &[f64], p: &SmoothingParams) -> (f64, f64) {
        let mut t = UtilityTracker::new(0, p.window);
        for &v in values {
            t.record_audit(v, p, 0).unwrap();
        }
        (t.ema().unwrap(), t.robust_score(p).unwrap())
    }

    proptest! {
        #[test]
        fn score_never_exceeds_median(
            values in prop::collection::vec(-10.0f64..10.0, 1..20),
            beta in 0.05f64..0.95,
            lambda_s in 0.0f64..3.0,
        ) {
            let p = SmoothingParams { beta, lambda_s, window: 5 };
            let mut t = UtilityTracker::new(0, 5);
            for &v in &values {
                t.record_audit(v, &p, 0).unwrap();
            }
            let h: Vec<f64> = t.history().collect();
            prop_assert!(h.len() <= 5);
            let med = stats::median(&h).unwrap();
            let score = t.robust_score(&p).unwrap();
            prop_assert!(score <= med + 1e-12);
            let iqr = stats::iqr(&h).unwrap();
            if lambda_s > 0.0 && iqr > 1e-12 {
                prop_assert!(score < med);
            }
        }

        #[test]
        fn shift_and_scale_equivariance(
            values in prop::collection::vec(-5.0f64..5.0, 1..15),
            k in -5.0f64..5.0,
            s in 0.1f64..10.0,
        ) {
            let p = SmoothingParams::default();
            let (ema, score) = run(&values, &p);
            let shifted: Vec<f64> = values.iter().map(|v| v + k).collect();
            let (ema_k, score_k) = run(&shifted, &p);
            prop_assert!((ema_k - (ema + k)).abs() < 1e-9);
            prop_assert!((score_k - (score + k)).abs() < 1e-9);
            let scaled: Vec<f64> = values.iter().map(|v| v * s).collect();
            let (ema_s, score_s) = run(&scaled, &p);
            prop_assert!((ema_s - ema * s).abs() < 1e-9 * (1.0 + ema_s.abs()));
            prop_assert!((score_s - score * s).abs() < 1e-9 * (1.0 + score_s.abs()));
        }
    }
}

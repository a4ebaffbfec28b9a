use super::DriverError;
use crate::allocator::AllocatorParams;
use crate::fsm::FsmParams;
use crate::oracle::{OracleSpec, SyntheticParams};
use crate::sampler::SamplerParams;
use crate::space::SpaceConfig;
use crate::tracker::SmoothingParams;
use serde::{Deserialize, Serialize};

/// Where evaluation scores come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSource {
    /// Generate a spec over the audit space.
    Synthetic(SyntheticParams),
    /// A fully specified surface.
    Spec(OracleSpec),
}

/// Total training steps for a shot count: 6000, 8000 and 12000 at 1, 5 and 10
/// shots, linear in between and beyond.
pub fn total_steps_for_shots(shots: u32) -> u64 {
    let s = f64::from(shots.max(1));
    let steps = if s <= 5.0 {
        6000.0 + (s - 1.0) * 500.0
    } else {
        8000.0 + (s - 5.0) * 800.0
    };
    steps.round() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub space: SpaceConfig,
    #[serde(default)]
    pub initial_active: Vec<usize>,
    pub oracle: OracleSource,
    #[serde(default)]
    pub sampler: SamplerParams,
    #[serde(default)]
    pub smoothing: SmoothingParams,
    #[serde(default)]
    pub allocator: AllocatorParams,
    #[serde(default)]
    pub fsm: FsmParams,
    /// Search-audit-allocate cycles.
    #[serde(default = "default_cycles")]
    pub cycles: u64,
    /// Training steps per search phase; derived from `shots` when absent.
    #[serde(default)]
    pub steps_per_cycle: Option<u64>,
    /// Steps for the final from-scratch training; derived from `shots` when absent.
    #[serde(default)]
    pub refinetune_steps: Option<u64>,
    /// Evaluation noise scales with `1 / shots`.
    #[serde(default = "default_shots")]
    pub shots: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_cycles() -> u64 {
    60
}

fn default_shots() -> u32 {
    1
}

impl RunConfig {
    /// The reference synthetic setup: default audit space over two layers,
    /// a generated oracle keyed by `seed`, and default engine parameters.
    pub fn synthetic(seed: u64, shots: u32) -> Self {
        Self {
            space: SpaceConfig::reference(),
            initial_active: Vec::new(),
            oracle: OracleSource::Synthetic(SyntheticParams { seed, ..Default::default() }),
            sampler: SamplerParams::default(),
            smoothing: SmoothingParams::default(),
            allocator: AllocatorParams::default(),
            fsm: FsmParams::default(),
            cycles: default_cycles(),
            steps_per_cycle: None,
            refinetune_steps: None,
            shots,
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, DriverError> {
        serde_json::from_str(text).map_err(|e| DriverError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn total_steps(&self) -> u64 {
        total_steps_for_shots(self.shots)
    }

    pub fn steps_per_cycle(&self) -> u64 {
        self.steps_per_cycle
            .unwrap_or_else(|| (self.total_steps() / self.cycles.max(1)).max(1))
    }

    pub fn refinetune_steps(&self) -> u64 {
        self.refinetune_steps.unwrap_or_else(|| self.total_steps())
    }

    pub fn noise_scale(&self) -> f64 {
        1.0 / f64::from(self.shots.max(1))
    }

    /// Checks everything that does not depend on the built audit space.
    pub fn validate(&self) -> Result<(), DriverError> {
        let bad = |m: &str| Err(DriverError::Config(m.into()));
        if self.cycles == 0 {
            return bad("cycles must be at least 1");
        }
        if self.steps_per_cycle == Some(0) {
            return bad("steps_per_cycle must be at least 1");
        }
        if self.refinetune_steps == Some(0) {
            return bad("refinetune_steps must be at least 1");
        }
        if self.shots == 0 {
            return bad("shots must be at least 1");
        }
        self.smoothing.validate().map_err(|e| DriverError::Config(e.to_string()))?;
        self.fsm.validate().map_err(|e| DriverError::Config(e.to_string()))?;
        Ok(())
    }
}

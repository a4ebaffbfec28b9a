//! Online budget-constrained selection of adapter units from noisy on/off
//! utilities: audit-space construction, robust utility tracking, audit
//! sampling, knapsack allocation with hysteresis, a vote-counter stabilizer,
//! evaluation oracles and the driver loop tying them together.

pub mod allocator;
pub mod bounds;
pub mod driver;
pub mod fsm;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod space;
pub mod stats;
pub mod tracker;

pub use allocator::{
    apply_hysteresis, brute_force_optimum, final_resolve, greedy_allocate, AllocError, AllocationProposal,
    AllocatorParams,
};
pub use driver::{
    compute_diagnostics, run_full, run_full_with, run_random_baseline, run_with_oracle, Diagnostics,
    DriverError, Engine, EventLog, ExecOptions, OracleSource, RunConfig, RunOutput, RunReport,
};
pub use fsm::{FsmError, FsmParams, FsmState};
pub use oracle::{
    EvalOracle, OracleError, OracleSpec, RecordingOracle, ReplayOracle, SyntheticOracle, SyntheticParams,
    TrainingState,
};
pub use sampler::{sample_audit_batch, AuditBatch, SamplerError, SamplerParams};
pub use space::{
    build_audit_space, AdapterKind, AdapterUnit, AuditSpace, BackboneDesc, Family, InitialGates, SpaceConfig,
    SpaceError, Slot, Topology,
};
pub use tracker::{SmoothingParams, TrackerError, UtilityTracker};

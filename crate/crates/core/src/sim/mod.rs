//! Deterministic simulator of multithreaded workloads.
//!
//! The actual-speedup mode is ground truth: it literally shortens a line.
//! The virtual and profile modes run the same delay-counter logic as the
//! live backend against a virtual clock, so their predictions can be checked
//! against that truth.

mod exec;
mod oracle;
pub mod scenarios;
mod workload;

pub use exec::{simulate, ItemLatency, LineStats, SimError, SimMode, SimParams, SimResult, ThreadStats};
pub use oracle::{
    accuracy_protocol, oracle_speedup, profile_runs, profile_simulated, speedup_between, virtual_speedup,
    AccuracyOutcome,
};
pub use workload::{load_workload, CmpOp, Cond, Node, ProgressDecl, Segment, ThreadTemplate, Workload, WorkloadError};

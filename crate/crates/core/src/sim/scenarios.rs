//! The canonical workload library, embedded from `workloads/`.

use super::workload::{load_workload, Workload};

pub const JOIN2: &str = include_str!("../../workloads/join2.wl");
pub const FIG_REPLICA: &str = include_str!("../../workloads/fig_replica.wl");
pub const BARRIER_PHASES: &str = include_str!("../../workloads/barrier_phases.wl");
pub const MUTEX_CONTENTION: &str = include_str!("../../workloads/mutex_contention.wl");
pub const PRODUCER_CONSUMER: &str = include_str!("../../workloads/producer_consumer.wl");
pub const PIPELINE: &str = include_str!("../../workloads/pipeline.wl");
pub const SPIN_BARRIER: &str = include_str!("../../workloads/spin_barrier.wl");
pub const PHASED: &str = include_str!("../../workloads/phased.wl");
pub const MD1_STABLE: &str = include_str!("../../workloads/md1_stable.wl");
pub const MD1_UNSTABLE: &str = include_str!("../../workloads/md1_unstable.wl");
pub const DEDUP: &str = include_str!("../../workloads/dedup.wl");
pub const BAD: &str = include_str!("../../workloads/bad.wl");

/// Every valid scenario by name.
pub const ALL: &[(&str, &str)] = &[
    ("join2", JOIN2),
    ("fig_replica", FIG_REPLICA),
    ("barrier_phases", BARRIER_PHASES),
    ("mutex_contention", MUTEX_CONTENTION),
    ("producer_consumer", PRODUCER_CONSUMER),
    ("pipeline", PIPELINE),
    ("spin_barrier", SPIN_BARRIER),
    ("phased", PHASED),
    ("md1_stable", MD1_STABLE),
    ("md1_unstable", MD1_UNSTABLE),
    ("dedup", DEDUP),
];

/// The workloads of the virtual/actual equivalence matrix.
pub const EQUIVALENCE_MATRIX: &[&str] = &[
    "join2",
    "pipeline",
    "barrier_phases",
    "mutex_contention",
    "producer_consumer",
];

pub fn text(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Loads a scenario by name. Panics on an unknown name or invalid text,
/// both of which are programming errors.
pub fn load(name: &str) -> Workload {
    let text = text(name).unwrap_or_else(|| panic!("unknown scenario `{name}`"));
    load_workload(text).unwrap_or_else(|e| panic!("scenario `{name}`: {e}"))
}

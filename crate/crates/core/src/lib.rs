//! Causal profiling with sampled virtual speedups.
//!
//! A causal profiler answers "how much faster would the whole program get if
//! this line ran faster?" It runs many short performance experiments. Each
//! picks one source line and a speedup percentage, then pauses every *other*
//! thread whenever the line is sampled, which has the same relative effect
//! as actually optimizing the line. Progress point visit rates before and
//! after give the predicted program speedup.
//!
//! The crate contains:
//!
//! * [`model`] and [`time`]: source locations, scopes, speedups, nanosecond time.
//! * [`runtime`]: sampling, delay counters, progress points.
//! * [`engine`]: experiment selection, lifecycle and records.
//! * [`live`]: instrumentation API for real threads.
//! * [`sim`]: a deterministic thread simulator whose actual-speedup mode is
//!   the ground truth for checking predictions.
//! * [`analysis`]: profile files, causal profiles, reports.
//! * [`cli`]: the `causard` command line.

pub mod analysis;
pub mod cli;
pub mod engine;
pub mod live;
pub mod model;
pub mod runtime;
pub mod sim;
pub mod time;

pub use model::{in_scope, parse_location, ProgressKind, ProgressPointId, Scope, SourceLocation, SpeedupPct};
pub use time::TimeNs;

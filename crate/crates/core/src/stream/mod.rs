//! Streaming benchmark harness: vector files, synthetic drifting data,
//! scenario construction, recall evaluation, and I/O cost measurement.

pub mod eval;
pub mod run;
pub mod scenario;
pub mod synth;
pub mod vecs;

pub use eval::{ground_truth, median, normalize, quantile, recall_at, rolling_quantile};
pub use run::{
    build_method, dedrift_m, io_cost_experiment, run_scenario, run_scenario_with, write_io_csv, write_recall_csv, IoCostRow,
    Method, MethodConfig, RecallReport, Rescaled, StepRecord, Truth,
};
pub use scenario::{construct_stream, Scenario, Step, StreamParams};
pub use synth::{drifting_mixture, MixtureConfig};
pub use vecs::Vectors;

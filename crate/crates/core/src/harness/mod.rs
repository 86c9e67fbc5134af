//! Use-case workloads and the metric plumbing around them.

pub mod cloud;
pub mod entropy;
pub mod experiment;
pub mod metrics;
pub mod opot;
pub mod usecases;

pub use experiment::{run_experiment, ExperimentError, ExperimentOutcome, ExperimentSpec, Workload};
pub use metrics::{Format, MetricRecord, MetricSink, MetricStore, MetricsError};

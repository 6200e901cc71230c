//! Verification and benchmarking harness for `versiontree`.

pub mod bench;
pub mod history;
pub mod lincheck;
pub mod stepper;
pub mod stress;
pub mod workload;

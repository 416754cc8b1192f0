//! Replicated simulation runs, policy comparison, reporting, synthetic
//! data generation and the `elas` command line.

pub mod impute;
pub mod run;
pub mod stats;
pub mod synth;

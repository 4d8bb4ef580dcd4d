//! Command implementations behind the `ctrlr` binary: training runs,
//! guided sampling, HMM distillation, DFA compilation, report generation,
//! and the oracle verification suites.

pub mod artifacts;
pub mod commands;
pub mod manifest;
pub mod report;
pub mod svg;

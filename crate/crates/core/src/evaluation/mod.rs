//! Metrics, sweeps, ablations, likelihood oracles and toy data.

pub mod ablation;
pub mod learner;
pub mod metrics;
pub mod oracle;
pub mod sweep;
pub mod toy;

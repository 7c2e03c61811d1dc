//! Monotonic Monte Carlo Control: per-period neural policies for
//! finite-horizon stochastic control, trained by backward sweeps that only
//! accept improvements.

pub mod autodiff;
pub mod harness;
pub mod mmcc;
pub mod optim;
pub mod policy;
pub mod problems;
pub mod simulate;

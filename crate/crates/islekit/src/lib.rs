//! Hybrid islanding detection for inverter-rich distribution feeders.
//!
//! The library tracks a deliberately injected 75 Hz inter-harmonic with a
//! complex-state extended Kalman filter, watches the average rate of change
//! of the terminal RMS voltage (ARCV), and confirms suspected islands with a
//! brief generation shift before declaring a verdict. A small phasor-domain
//! feeder simulator produces the closed-loop test scenarios.

// Validation guards use negated comparisons (`!(x > 0.0)`) so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod detector;
pub mod ekf;
pub mod grid;
pub mod measures;
pub mod pipeline;
pub mod scenario;
pub mod signal;

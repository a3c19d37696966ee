//! Experiment runner and real-socket mode for the multicast overlay.

pub mod experiments;
pub mod real;
pub mod smoke;

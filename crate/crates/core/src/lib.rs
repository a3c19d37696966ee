//! Core of an application-layer multicast overlay: the scenario model, a
//! deterministic network simulator, the overlay/end/monitor host state
//! machines and the wire codec they share.

pub mod cluster;
pub mod endhost;
pub mod model;
pub mod monitor;
pub mod node;
pub mod overlay;
pub mod simnet;
pub mod wire;

//! Mesh NoC performance toolkit.
//!
//! Three pillars share one topology/traffic core:
//!
//! * a deterministic cycle-accurate simulator with pluggable router
//!   architectures (unidirectional, bidirectional, flit-speedup, EVC+hub),
//! * analytical latency prediction via a GE/G/1/K queuing chain and a
//!   trained support-vector regressor,
//! * offline routing synthesis: thermal-aware deadlock-free path sets with
//!   LP traffic allocation, and fault-tolerant reconfiguration.

pub mod adaptive;
pub mod error;
pub mod fault;
pub mod fsnoc;
pub mod harness;
pub mod queuing;
pub mod sim;
pub mod svr;
pub mod thermal;
pub mod topology;
pub mod traffic;

pub use error::{Error, Result};
pub use topology::{Direction, LinkId, MeshTopology, Tile};
pub use traffic::{CoreCommGraph, Flow, TrafficPattern, TrafficSpec};

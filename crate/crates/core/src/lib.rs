//! Self-healing pipeline simulator for computing continua.
//!
//! The crate models a continuum of nodes and tasks, injects failures, and
//! runs four healing layers over it: containment, log-driven diagnosis,
//! meta-cognitive hypothesis search, and a shared knowledge store.

pub mod config;
pub mod containment;
pub mod diagnosis;
pub mod faults;
pub mod knowledge;
pub mod logs;
pub mod metacog;
pub mod model;
pub mod reasoner;
pub mod sim;
pub mod telemetry;

//! Deterministic discrete-event simulation of IoT, fog and edge deployments.

pub mod application;
pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod time;
pub mod topology;

pub use time::SimTime;

//! Discrete-time load-balancing simulator with push- and pull-based
//! dispatchers, a resource-pooled baseline and tilted-distribution analysis.

pub mod baseline;
pub mod certify;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod scenario;
pub mod stochastic;
pub mod tilt;

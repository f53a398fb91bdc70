//! Planning and simulation library for two-road merges shared by connected
//! automated vehicles (CAVs) and human-driven vehicles (HDVs).

pub mod engine;
pub mod human;
pub mod metrics;
pub mod planner;
pub mod predictor;
pub mod risk;
pub mod rng;
pub mod scenario;
pub mod trajectory;

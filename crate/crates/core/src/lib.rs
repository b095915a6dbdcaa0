//! Deterministic simulator for clustered federated semi-supervised learning
//! over a device / edge / cloud hierarchy.

pub mod cluster;
pub mod config;
pub mod data;
pub mod model;
pub mod net;
pub mod ssl;
pub mod orchestrator;
pub mod experiment;

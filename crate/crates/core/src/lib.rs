//! A miniature interactive analysis facility.

pub mod auth;
pub mod batch;
pub mod dataset;
pub mod engine;
pub mod format;
pub mod scheduler;
pub mod wire;
pub mod sim;
pub mod worker;
pub mod bench;
pub mod proxy;
pub mod ingress;
pub mod net;
pub mod launcher;

//! Wall-clock network services: the mTLS scheduler server, the worker agent,
//! the batch-system server and their clients.

pub mod batch;
pub mod client;
pub mod scheduler;
pub mod tls;
pub mod worker;

use thiserror::Error;

use crate::auth::PkiError;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tls: {0}")]
    Tls(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("{addr} unreachable after {attempts} attempts")]
    Unreachable { addr: String, attempts: u32 },
    #[error("timed out: {0}")]
    Timeout(String),
}

/// Seconds since the unix epoch as f64.
pub fn unix_secs_f64() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

//! Simulated federation origins: a directory-backed store and its TCP
//! server/client pair. Origins accept only the proxy's federation credential.

use std::io;
use std::net::TcpStream;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tracing::{debug, warn};

use super::ProxyError;
use crate::format::{FormatError, LocalFiles, RangeRead};
use crate::wire::{self, BlockStatus};

pub trait Origin: Send + Sync {
    /// Bytes `[offset, offset + len)` of `path`, short at EOF.
    fn fetch(&self, path: &str, offset: u64, len: u64) -> Result<Vec<u8>, ProxyError>;
}

/// Maps `/store/...` paths onto files under a root directory.
#[derive(Debug, Clone)]
pub struct DirOrigin {
    root: PathBuf,
    fetches: Arc<AtomicU64>,
}

impl DirOrigin {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            fetches: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Number of fetches served so far.
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::SeqCst)
    }

    fn resolve(&self, path: &str) -> Result<PathBuf, ProxyError> {
        let rel = Path::new(path.trim_start_matches('/'));
        if !path.starts_with("/store/") || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(ProxyError::BadRequest(format!("bad path {path:?}")));
        }
        Ok(self.root.join(rel))
    }
}

impl Origin for DirOrigin {
    fn fetch(&self, path: &str, offset: u64, len: u64) -> Result<Vec<u8>, ProxyError> {
        self.fetches.fetch_add(1, Ordering::SeqCst);
        let full = self.resolve(path)?;
        if !full.is_file() {
            return Err(ProxyError::NotFound(path.to_owned()));
        }
        LocalFiles
            .read_at(&full.to_string_lossy(), offset, len)
            .map_err(|e| ProxyError::Origin(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OriginRequest {
    pub path: String,
    pub offset: u64,
    pub length: u64,
    pub cred: String,
}

/// Talks to an origin server over TCP, one connection per request.
#[derive(Debug, Clone)]
pub struct TcpOrigin {
    addr: String,
    cred: String,
}

impl TcpOrigin {
    pub fn new(addr: &str, cred: &str) -> Self {
        Self {
            addr: addr.to_owned(),
            cred: cred.to_owned(),
        }
    }
}

impl Origin for TcpOrigin {
    fn fetch(&self, path: &str, offset: u64, len: u64) -> Result<Vec<u8>, ProxyError> {
        let io_err = |e: io::Error| ProxyError::Origin(format!("{}: {e}", self.addr));
        let mut stream = TcpStream::connect(&self.addr).map_err(io_err)?;
        stream.set_read_timeout(Some(Duration::from_secs(30))).map_err(io_err)?;
        let req = OriginRequest {
            path: path.to_owned(),
            offset,
            length: len,
            cred: self.cred.clone(),
        };
        wire::send(&mut stream, &req).map_err(|e| ProxyError::Origin(e.to_string()))?;
        let (status, payload) = wire::read_block(&mut stream).map_err(|e| ProxyError::Origin(e.to_string()))?;
        block_result(status, payload)
    }
}

pub(crate) fn block_result(status: BlockStatus, payload: Vec<u8>) -> Result<Vec<u8>, ProxyError> {
    let msg = || String::from_utf8_lossy(&payload).into_owned();
    match status {
        BlockStatus::Ok => Ok(payload),
        BlockStatus::NotFound => Err(ProxyError::NotFound(msg())),
        BlockStatus::Denied => Err(ProxyError::Denied(msg())),
        BlockStatus::BadRequest => Err(ProxyError::BadRequest(msg())),
    }
}

/// Serves `origin` until the listener fails. Requests without the
/// federation credential are denied.
pub async fn serve_origin(listener: TcpListener, origin: DirOrigin, cred: String) -> io::Result<()> {
    let origin = Arc::new(origin);
    let cred = Arc::new(cred);
    loop {
        let (mut sock, peer) = listener.accept().await?;
        let origin = origin.clone();
        let cred = cred.clone();
        tokio::spawn(async move {
            let req: OriginRequest = match wire::recv_async(&mut sock).await {
                Ok(r) => r,
                Err(e) => {
                    debug!(%peer, "origin request dropped: {e}");
                    return;
                }
            };
            let reply = if req.cred != *cred {
                Err(ProxyError::Denied("federation credential required".into()))
            } else if req.length > wire::MAX_FRAME as u64 {
                Err(ProxyError::BadRequest("length over 16 MiB".into()))
            } else {
                let o = origin.clone();
                tokio::task::spawn_blocking(move || o.fetch(&req.path, req.offset, req.length))
                    .await
                    .unwrap_or_else(|e| Err(ProxyError::Origin(e.to_string())))
            };
            let (status, payload) = match reply {
                Ok(bytes) => (BlockStatus::Ok, bytes),
                Err(e) => (e.status(), e.to_string().into_bytes()),
            };
            if let Err(e) = wire::write_block_async(&mut sock, status, &payload).await {
                warn!(%peer, "origin reply failed: {e}");
            }
        });
    }
}

impl From<ProxyError> for FormatError {
    fn from(e: ProxyError) -> Self {
        FormatError::Source(e.to_string())
    }
}

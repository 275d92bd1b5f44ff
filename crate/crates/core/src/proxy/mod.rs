//! Caching data proxy, simulated federation origins and the client-side
//! open-hook that sends remote reads through the proxy.

mod cache;
mod origin;
mod url;

use std::io;
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tracing::debug;

pub use cache::{CacheStats, DataProxy, ProxyConfig, DEFAULT_BLOCK_SIZE};
pub use origin::{serve_origin, DirOrigin, Origin, OriginRequest, TcpOrigin};
pub use url::{rewrite_url, OpenTarget, RemoteUrl, UrlError};

use crate::auth::unix_now;
use crate::format::{FormatError, LocalFiles, RangeRead};
use crate::wire::{self, BlockStatus, WireError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProxyError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("denied: {0}")]
    Denied(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("origin failure: {0}")]
    Origin(String),
}

impl ProxyError {
    pub fn status(&self) -> BlockStatus {
        match self {
            ProxyError::NotFound(_) => BlockStatus::NotFound,
            ProxyError::Denied(_) => BlockStatus::Denied,
            ProxyError::BadRequest(_) | ProxyError::Origin(_) => BlockStatus::BadRequest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ProxyRequest {
    Fetch {
        path: String,
        offset: u64,
        length: u64,
        token: String,
    },
    Stats,
}

/// Serves proxy requests until the listener fails. Each connection may carry
/// any number of requests.
pub async fn serve_proxy(listener: TcpListener, proxy: Arc<DataProxy>) -> io::Result<()> {
    loop {
        let (sock, peer) = listener.accept().await?;
        let proxy = proxy.clone();
        tokio::spawn(async move {
            if let Err(e) = proxy_connection(sock, proxy).await {
                debug!(%peer, "proxy connection ended: {e}");
            }
        });
    }
}

async fn proxy_connection(mut sock: tokio::net::TcpStream, proxy: Arc<DataProxy>) -> Result<(), WireError> {
    loop {
        let req: ProxyRequest = match wire::recv_async(&mut sock).await {
            Ok(r) => r,
            Err(WireError::Closed) => return Ok(()),
            Err(WireError::Decode(e)) => {
                let msg = format!("bad request: {e}");
                wire::write_block_async(&mut sock, BlockStatus::BadRequest, msg.as_bytes()).await?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let (status, payload) = match req {
            ProxyRequest::Stats => (
                BlockStatus::Ok,
                serde_json::to_vec(&proxy.stats()).expect("stats serialize"),
            ),
            ProxyRequest::Fetch {
                path,
                offset,
                length,
                token,
            } => {
                let p = proxy.clone();
                let res = tokio::task::spawn_blocking(move || p.fetch(&path, offset, length, &token, unix_now()))
                    .await
                    .unwrap_or_else(|e| Err(ProxyError::Origin(e.to_string())));
                match res {
                    Ok(bytes) => (BlockStatus::Ok, bytes),
                    Err(e) => (e.status(), e.to_string().into_bytes()),
                }
            }
        };
        wire::write_block_async(&mut sock, status, &payload).await?;
    }
}

/// Blocking proxy client that keeps one connection open.
#[derive(Debug)]
pub struct ProxyClient {
    addr: String,
    conn: Mutex<Option<TcpStream>>,
}

impl ProxyClient {
    pub fn new(addr: &str) -> Self {
        Self {
            addr: addr.to_owned(),
            conn: Mutex::new(None),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn round_trip(&self, req: &ProxyRequest) -> Result<(BlockStatus, Vec<u8>), WireError> {
        let mut guard = self.conn.lock().expect("proxy client lock");
        for attempt in 0..2 {
            if guard.is_none() {
                let s = TcpStream::connect(&self.addr)?;
                s.set_read_timeout(Some(Duration::from_secs(60)))?;
                s.set_nodelay(true)?;
                *guard = Some(s);
            }
            let stream = guard.as_mut().unwrap();
            let res = wire::send(stream, req).and_then(|_| wire::read_block(stream));
            match res {
                Ok(r) => return Ok(r),
                Err(e) if attempt == 0 => {
                    debug!("proxy connection reset: {e}");
                    *guard = None;
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("second attempt returns")
    }

    pub fn fetch(&self, path: &str, offset: u64, length: u64, token: &str) -> Result<Vec<u8>, ProxyError> {
        let req = ProxyRequest::Fetch {
            path: path.to_owned(),
            offset,
            length,
            token: token.to_owned(),
        };
        let (status, payload) = self.round_trip(&req).map_err(|e| ProxyError::Origin(e.to_string()))?;
        origin::block_result(status, payload)
    }

    pub fn stats(&self) -> Result<CacheStats, ProxyError> {
        let (status, payload) = self
            .round_trip(&ProxyRequest::Stats)
            .map_err(|e| ProxyError::Origin(e.to_string()))?;
        let bytes = origin::block_result(status, payload)?;
        serde_json::from_slice(&bytes).map_err(|e| ProxyError::BadRequest(e.to_string()))
    }
}

/// The worker's open-hook: `root://` URLs are read through the proxy with
/// the data token attached, local paths straight from disk.
#[derive(Debug, Clone)]
pub struct OpenHook {
    client: Arc<ProxyClient>,
    token: String,
}

impl OpenHook {
    pub fn new(proxy_addr: &str, token: &str) -> Self {
        Self {
            client: Arc::new(ProxyClient::new(proxy_addr)),
            token: token.to_owned(),
        }
    }
}

impl RangeRead for OpenHook {
    fn read_at(&self, path: &str, offset: u64, len: u64) -> Result<Vec<u8>, FormatError> {
        match rewrite_url(path, self.client.addr(), &self.token).map_err(|e| FormatError::Source(e.to_string()))? {
            OpenTarget::Local(p) => LocalFiles.read_at(&p, offset, len),
            OpenTarget::Proxy { path, token, .. } => Ok(self.client.fetch(&path, offset, len, &token)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{Audience, TokenKeys};

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn proxy_over_tcp_with_origin_server() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("store/a")).unwrap();
        let data: Vec<u8> = (0..200_000u32).map(|i| (i % 253) as u8).collect();
        std::fs::write(dir.path().join("store/a/x.bin"), &data).unwrap();
        let origin = DirOrigin::new(dir.path());
        let ol = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let origin_addr = ol.local_addr().unwrap().to_string();
        tokio::spawn(serve_origin(ol, origin.clone(), "fed-secret".into()));

        let keys = TokenKeys::generate();
        let wrong = Arc::new(DataProxy::new(
            Arc::new(TcpOrigin::new(&origin_addr, "nope")),
            keys.clone(),
            ProxyConfig::default(),
        ));
        let tok = keys.mint("alice", Audience::Data, unix_now(), 600);
        let denied = tokio::task::spawn_blocking({
            let (w, t) = (wrong.clone(), tok.clone());
            move || w.fetch("/store/a/x.bin", 0, 10, &t, unix_now())
        })
        .await
        .unwrap();
        assert!(matches!(denied, Err(ProxyError::Denied(_))));

        let proxy = Arc::new(DataProxy::new(
            Arc::new(TcpOrigin::new(&origin_addr, "fed-secret")),
            keys.clone(),
            ProxyConfig::default(),
        ));
        let pl = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let proxy_addr = pl.local_addr().unwrap().to_string();
        tokio::spawn(serve_proxy(pl, proxy.clone()));

        let (got, stats, bad) = tokio::task::spawn_blocking(move || {
            let hook = OpenHook::new(&proxy_addr, &tok);
            let got = hook.read_at("root://fed.example//store/a/x.bin", 1_000, 150_000).unwrap();
            let client = ProxyClient::new(&proxy_addr);
            let bad = client.fetch("/store/a/x.bin", 0, 10, "garbage");
            (got, client.stats().unwrap(), bad)
        })
        .await
        .unwrap();
        assert_eq!(got, data[1_000..151_000]);
        assert_eq!(stats.origin_fetches, 3);
        assert!(matches!(bad, Err(ProxyError::Denied(_))));
    }
}

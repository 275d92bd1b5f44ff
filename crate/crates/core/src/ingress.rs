//! SNI passthrough ingress: peeks the TLS ClientHello, picks a backend by
//! server name and splices raw bytes. TLS is never terminated here.

use std::collections::BTreeMap;
use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tracing::{debug, info};

use crate::wire;

/// Largest ClientHello we are willing to buffer.
pub const MAX_HELLO: usize = 16 * 1024;
pub const DEFAULT_PEEK_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SniError {
    #[error("not TLS")]
    NotTls,
    #[error("need more bytes")]
    Incomplete,
    #[error("client hello too large")]
    Oversized,
    #[error("malformed client hello: {0}")]
    Malformed(&'static str),
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], SniError> {
        let end = self.pos.checked_add(n).ok_or(SniError::Malformed(what))?;
        let s = self.b.get(self.pos..end).ok_or(SniError::Malformed(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<usize, SniError> {
        Ok(self.take(1, what)?[0] as usize)
    }

    fn u16(&mut self, what: &'static str) -> Result<usize, SniError> {
        let s = self.take(2, what)?;
        Ok(u16::from_be_bytes([s[0], s[1]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.b.len()
    }
}

/// Concatenates handshake-record payloads until the whole ClientHello
/// message is present.
fn hello_message(bytes: &[u8]) -> Result<Vec<u8>, SniError> {
    let mut msg = Vec::new();
    let mut pos = 0;
    loop {
        if pos >= bytes.len() {
            return Err(if bytes.len() >= MAX_HELLO { SniError::Oversized } else { SniError::Incomplete });
        }
        if bytes[pos] != 0x16 {
            return Err(if pos == 0 { SniError::NotTls } else { SniError::Malformed("non-handshake record") });
        }
        let Some(hdr) = bytes.get(pos..pos + 5) else {
            return Err(SniError::Incomplete);
        };
        if hdr[1] != 0x03 {
            return Err(if pos == 0 { SniError::NotTls } else { SniError::Malformed("record version") });
        }
        let len = u16::from_be_bytes([hdr[3], hdr[4]]) as usize;
        if len == 0 || len > MAX_HELLO {
            return Err(SniError::Malformed("record length"));
        }
        let Some(body) = bytes.get(pos + 5..pos + 5 + len) else {
            return Err(if pos + 5 + len > MAX_HELLO + 5 { SniError::Oversized } else { SniError::Incomplete });
        };
        msg.extend_from_slice(body);
        pos += 5 + len;
        if msg.len() >= 4 {
            if msg[0] != 0x01 {
                return Err(SniError::Malformed("not a client hello"));
            }
            let need = 4 + (u32::from_be_bytes([0, msg[1], msg[2], msg[3]]) as usize);
            if need > MAX_HELLO {
                return Err(SniError::Oversized);
            }
            if msg.len() >= need {
                msg.truncate(need);
                return Ok(msg);
            }
        }
    }
}

/// Server name from the first bytes of a TLS connection, `None` when the
/// ClientHello carries no server_name extension.
pub fn parse_sni(bytes: &[u8]) -> Result<Option<String>, SniError> {
    let msg = hello_message(bytes)?;
    let mut c = Cursor { b: &msg[4..], pos: 0 };
    c.take(2, "client version")?;
    c.take(32, "random")?;
    let sid = c.u8("session id")?;
    c.take(sid, "session id")?;
    let suites = c.u16("cipher suites")?;
    c.take(suites, "cipher suites")?;
    let comp = c.u8("compression")?;
    c.take(comp, "compression")?;
    if c.done() {
        return Ok(None);
    }
    let ext_len = c.u16("extensions")?;
    let mut ext = Cursor {
        b: c.take(ext_len, "extensions")?,
        pos: 0,
    };
    while !ext.done() {
        let ty = ext.u16("extension type")?;
        let len = ext.u16("extension length")?;
        let data = ext.take(len, "extension body")?;
        if ty != 0 {
            continue;
        }
        let mut sn = Cursor { b: data, pos: 0 };
        let list_len = sn.u16("server name list")?;
        let mut list = Cursor {
            b: sn.take(list_len, "server name list")?,
            pos: 0,
        };
        while !list.done() {
            let name_type = list.u8("name type")?;
            let n = list.u16("name length")?;
            let name = list.take(n, "name")?;
            if name_type == 0 {
                let name = std::str::from_utf8(name).map_err(|_| SniError::Malformed("name not utf-8"))?;
                return Ok(Some(name.to_ascii_lowercase()));
            }
        }
        return Ok(None);
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("duplicate hostname {0}")]
    Duplicate(String),
    #[error("unknown hostname {0}")]
    Unknown(String),
    #[error("invalid hostname {0:?}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routes {
    pub version: u64,
    pub map: BTreeMap<String, String>,
}

/// Hostname → backend map, swapped atomically on every update.
#[derive(Debug, Default)]
pub struct RouteTable {
    current: RwLock<Arc<Routes>>,
}

fn valid_hostname(h: &str) -> bool {
    !h.is_empty()
        && h.len() <= 253
        && h.split('.').all(|l| {
            !l.is_empty()
                && l.len() <= 63
                && !l.starts_with('-')
                && !l.ends_with('-')
                && l.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
        })
}

impl RouteTable {
    pub fn snapshot(&self) -> Arc<Routes> {
        self.current.read().expect("route lock").clone()
    }

    pub fn version(&self) -> u64 {
        self.snapshot().version
    }

    pub fn len(&self) -> usize {
        self.snapshot().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolve(&self, hostname: &str) -> Option<String> {
        self.snapshot().map.get(&hostname.to_ascii_lowercase()).cloned()
    }

    fn update(&self, f: impl FnOnce(&mut BTreeMap<String, String>) -> Result<(), RouteError>) -> Result<u64, RouteError> {
        let mut guard = self.current.write().expect("route lock");
        let mut next = (**guard).clone();
        f(&mut next.map)?;
        next.version += 1;
        let v = next.version;
        *guard = Arc::new(next);
        Ok(v)
    }

    pub fn register(&self, hostname: &str, backend: &str) -> Result<u64, RouteError> {
        let host = hostname.to_ascii_lowercase();
        if !valid_hostname(&host) {
            return Err(RouteError::Invalid(hostname.to_owned()));
        }
        self.update(|m| {
            if m.contains_key(&host) {
                return Err(RouteError::Duplicate(host.clone()));
            }
            m.insert(host, backend.to_owned());
            Ok(())
        })
    }

    pub fn remove(&self, hostname: &str) -> Result<u64, RouteError> {
        let host = hostname.to_ascii_lowercase();
        self.update(|m| m.remove(&host).map(|_| ()).ok_or(RouteError::Unknown(host.clone())))
    }
}

#[derive(Debug, Default)]
pub struct IngressStats {
    pub routed: AtomicU64,
    pub rejected: AtomicU64,
}

async fn peek_hello(sock: &mut TcpStream, timeout: Duration) -> Result<(Vec<u8>, Option<String>), SniError> {
    let mut buf = Vec::with_capacity(1024);
    let fut = async {
        loop {
            match parse_sni(&buf) {
                Err(SniError::Incomplete) => {}
                other => return other,
            }
            if buf.len() >= MAX_HELLO + 5 {
                return Err(SniError::Oversized);
            }
            let mut chunk = [0u8; 2048];
            let n = sock.read(&mut chunk).await.map_err(|_| SniError::Incomplete)?;
            if n == 0 {
                return Err(SniError::Incomplete);
            }
            buf.extend_from_slice(&chunk[..n]);
        }
    };
    let name = tokio::time::timeout(timeout, fut).await.map_err(|_| SniError::Incomplete)??;
    Ok((buf, name))
}

async fn relay(mut client: TcpStream, routes: Arc<RouteTable>, stats: Arc<IngressStats>, timeout: Duration) {
    let peer = client.peer_addr().ok();
    let (hello, name) = match peek_hello(&mut client, timeout).await {
        Ok(v) => v,
        Err(e) => {
            debug!(?peer, "closing: {e}");
            stats.rejected.fetch_add(1, Ordering::Relaxed);
            return;
        }
    };
    let Some(backend) = name.as_deref().and_then(|n| routes.resolve(n)) else {
        debug!(?peer, ?name, "closing: no route");
        stats.rejected.fetch_add(1, Ordering::Relaxed);
        return;
    };
    let mut upstream = match TcpStream::connect(&backend).await {
        Ok(s) => s,
        Err(e) => {
            debug!(?peer, backend, "backend connect failed: {e}");
            stats.rejected.fetch_add(1, Ordering::Relaxed);
            return;
        }
    };
    stats.routed.fetch_add(1, Ordering::Relaxed);
    let _ = client.set_nodelay(true);
    let _ = upstream.set_nodelay(true);
    if upstream.write_all(&hello).await.is_err() {
        return;
    }
    let _ = tokio::io::copy_bidirectional(&mut client, &mut upstream).await;
}

/// Accepts connections forever, routing each by SNI.
pub async fn serve_ingress(
    listener: TcpListener,
    routes: Arc<RouteTable>,
    stats: Arc<IngressStats>,
    peek_timeout: Duration,
) -> io::Result<()> {
    info!(addr = %listener.local_addr()?, "ingress listening");
    loop {
        let (sock, _) = listener.accept().await?;
        tokio::spawn(relay(sock, routes.clone(), stats.clone(), peek_timeout));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum AdminRequest {
    Register { hostname: String, backend: String },
    Remove { hostname: String },
    List,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminReply {
    pub ok: bool,
    pub version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub routes: BTreeMap<String, String>,
}

pub fn handle_admin(routes: &RouteTable, req: AdminRequest) -> AdminReply {
    let res = match req {
        AdminRequest::Register { hostname, backend } => routes.register(&hostname, &backend),
        AdminRequest::Remove { hostname } => routes.remove(&hostname),
        AdminRequest::List => {
            let snap = routes.snapshot();
            return AdminReply {
                ok: true,
                version: snap.version,
                error: None,
                routes: snap.map.clone(),
            };
        }
    };
    match res {
        Ok(version) => AdminReply {
            ok: true,
            version,
            ..AdminReply::default()
        },
        Err(e) => AdminReply {
            ok: false,
            version: routes.version(),
            error: Some(e.to_string()),
            ..AdminReply::default()
        },
    }
}

/// Route administration over framed JSON.
pub async fn serve_admin(listener: TcpListener, routes: Arc<RouteTable>) -> io::Result<()> {
    loop {
        let (mut sock, _) = listener.accept().await?;
        let routes = routes.clone();
        tokio::spawn(async move {
            while let Ok(req) = wire::recv_async::<_, AdminRequest>(&mut sock).await {
                let reply = handle_admin(&routes, req);
                if wire::send_async(&mut sock, &reply).await.is_err() {
                    break;
                }
            }
        });
    }
}

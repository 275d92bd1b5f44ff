use std::sync::Arc;

use rustls::pki_types::ServerName;
use rustls::server::WebPkiClientVerifier;
use rustls::{ClientConfig, ServerConfig};
use tokio::net::TcpStream;
use tokio_rustls::{client, TlsAcceptor, TlsConnector};

use super::NetError;
use crate::auth::{certs_from_pem, common_name, crypto_provider, key_from_pem, root_store};

/// Server side of the cluster link: presents the host certificate and
/// requires a client certificate from the cluster CA.
pub fn server_config(ca_pem: &str, cert_pem: &str, key_pem: &str) -> Result<Arc<ServerConfig>, NetError> {
    let roots = Arc::new(root_store(ca_pem)?);
    let verifier = WebPkiClientVerifier::builder_with_provider(roots, crypto_provider())
        .build()
        .map_err(|e| NetError::Tls(e.to_string()))?;
    let cfg = ServerConfig::builder_with_provider(crypto_provider())
        .with_safe_default_protocol_versions()
        .map_err(|e| NetError::Tls(e.to_string()))?
        .with_client_cert_verifier(verifier)
        .with_single_cert(certs_from_pem(cert_pem)?, key_from_pem(key_pem)?)
        .map_err(|e| NetError::Tls(e.to_string()))?;
    Ok(Arc::new(cfg))
}

/// Client side: trusts only the cluster CA and authenticates with the
/// user certificate.
pub fn client_config(ca_pem: &str, cert_pem: &str, key_pem: &str) -> Result<Arc<ClientConfig>, NetError> {
    let cfg = ClientConfig::builder_with_provider(crypto_provider())
        .with_safe_default_protocol_versions()
        .map_err(|e| NetError::Tls(e.to_string()))?
        .with_root_certificates(root_store(ca_pem)?)
        .with_client_auth_cert(certs_from_pem(cert_pem)?, key_from_pem(key_pem)?)
        .map_err(|e| NetError::Tls(e.to_string()))?;
    Ok(Arc::new(cfg))
}

pub fn acceptor(cfg: Arc<ServerConfig>) -> TlsAcceptor {
    TlsAcceptor::from(cfg)
}

/// TCP connect to `addr` then a TLS handshake for `server_name`, which is
/// both the SNI value and the name checked against the server certificate.
pub async fn connect(
    cfg: Arc<ClientConfig>,
    addr: &str,
    server_name: &str,
) -> Result<client::TlsStream<TcpStream>, NetError> {
    let tcp = TcpStream::connect(addr).await?;
    tcp.set_nodelay(true)?;
    let name = ServerName::try_from(server_name.to_owned()).map_err(|e| NetError::Tls(e.to_string()))?;
    Ok(TlsConnector::from(cfg).connect(name, tcp).await?)
}

/// CN of the peer's leaf certificate on an accepted connection.
pub fn peer_identity(conn: &rustls::ServerConnection) -> Option<String> {
    conn.peer_certificates()?.first().and_then(common_name)
}

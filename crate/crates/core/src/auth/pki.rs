//! Per-cluster certificate authorities and leaf certificates (ECDSA P-256).

use std::sync::Arc;

use rcgen::{
    BasicConstraints, Certificate, CertificateParams, DnType, ExtendedKeyUsagePurpose, IsCa, KeyPair, KeyUsagePurpose,
    PKCS_ECDSA_P256_SHA256,
};
use rustls::client::danger::ServerCertVerifier;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, ServerName, UnixTime};
use rustls::server::WebPkiClientVerifier;
use rustls::client::WebPkiServerVerifier;
use rustls::RootCertStore;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PkiError {
    #[error("certificate generation failed: {0}")]
    Generate(#[from] rcgen::Error),
    #[error("bad pem: {0}")]
    Pem(String),
    #[error("chain verification failed: {0}")]
    Verify(String),
}

pub fn crypto_provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

/// A PEM certificate with its PEM private key.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IssuedCert {
    pub cert_pem: String,
    pub key_pem: String,
}

pub struct ClusterCa {
    key: KeyPair,
    cert: Certificate,
}

impl std::fmt::Debug for ClusterCa {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClusterCa").finish_non_exhaustive()
    }
}

impl ClusterCa {
    pub fn generate(cluster_id: &str) -> Result<Self, PkiError> {
        let key = KeyPair::generate_for(&PKCS_ECDSA_P256_SHA256)?;
        let mut params = CertificateParams::new(Vec::<String>::new())?;
        params
            .distinguished_name
            .push(DnType::CommonName, format!("casa cluster CA {cluster_id}"));
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.key_usages = vec![
            KeyUsagePurpose::KeyCertSign,
            KeyUsagePurpose::CrlSign,
            KeyUsagePurpose::DigitalSignature,
        ];
        let cert = params.self_signed(&key)?;
        Ok(Self { key, cert })
    }

    pub fn cert_pem(&self) -> String {
        self.cert.pem()
    }

    fn issue(&self, cn: &str, sans: Vec<String>, usage: ExtendedKeyUsagePurpose) -> Result<IssuedCert, PkiError> {
        let key = KeyPair::generate_for(&PKCS_ECDSA_P256_SHA256)?;
        let mut params = CertificateParams::new(sans)?;
        params.distinguished_name.push(DnType::CommonName, cn);
        params.is_ca = IsCa::ExplicitNoCa;
        params.key_usages = vec![KeyUsagePurpose::DigitalSignature];
        params.extended_key_usages = vec![usage];
        let cert = params.signed_by(&key, &self.cert, &self.key)?;
        Ok(IssuedCert {
            cert_pem: cert.pem(),
            key_pem: key.serialize_pem(),
        })
    }

    /// Client certificate with CN = `subject`.
    pub fn issue_user(&self, subject: &str) -> Result<IssuedCert, PkiError> {
        self.issue(subject, Vec::new(), ExtendedKeyUsagePurpose::ClientAuth)
    }

    /// Server certificate valid for `names` (DNS names or IP literals).
    pub fn issue_host(&self, cn: &str, names: &[String]) -> Result<IssuedCert, PkiError> {
        self.issue(cn, names.to_vec(), ExtendedKeyUsagePurpose::ServerAuth)
    }
}

pub fn certs_from_pem(pem: &str) -> Result<Vec<CertificateDer<'static>>, PkiError> {
    let certs: Result<Vec<_>, _> = rustls_pemfile::certs(&mut pem.as_bytes()).collect();
    let certs = certs.map_err(|e| PkiError::Pem(e.to_string()))?;
    if certs.is_empty() {
        return Err(PkiError::Pem("no certificate found".into()));
    }
    Ok(certs)
}

pub fn key_from_pem(pem: &str) -> Result<PrivateKeyDer<'static>, PkiError> {
    rustls_pemfile::private_key(&mut pem.as_bytes())
        .map_err(|e| PkiError::Pem(e.to_string()))?
        .ok_or_else(|| PkiError::Pem("no private key found".into()))
}

pub fn root_store(ca_pem: &str) -> Result<RootCertStore, PkiError> {
    let mut roots = RootCertStore::empty();
    for cert in certs_from_pem(ca_pem)? {
        roots.add(cert).map_err(|e| PkiError::Pem(e.to_string()))?;
    }
    Ok(roots)
}

/// Checks that a client certificate chains to `ca_pem`.
pub fn verify_client_chain(ca_pem: &str, cert_pem: &str) -> Result<(), PkiError> {
    let verifier = WebPkiClientVerifier::builder_with_provider(Arc::new(root_store(ca_pem)?), crypto_provider())
        .build()
        .map_err(|e| PkiError::Verify(e.to_string()))?;
    let leaf = certs_from_pem(cert_pem)?.remove(0);
    verifier
        .verify_client_cert(&leaf, &[], UnixTime::now())
        .map(|_| ())
        .map_err(|e| PkiError::Verify(e.to_string()))
}

/// Checks that a server certificate chains to `ca_pem` and is valid for `name`.
pub fn verify_server_chain(ca_pem: &str, cert_pem: &str, name: &str) -> Result<(), PkiError> {
    let verifier = WebPkiServerVerifier::builder_with_provider(Arc::new(root_store(ca_pem)?), crypto_provider())
        .build()
        .map_err(|e| PkiError::Verify(e.to_string()))?;
    let leaf = certs_from_pem(cert_pem)?.remove(0);
    let server_name = ServerName::try_from(name.to_owned()).map_err(|e| PkiError::Verify(e.to_string()))?;
    verifier
        .verify_server_cert(&leaf, &[], &server_name, &[], UnixTime::now())
        .map(|_| ())
        .map_err(|e| PkiError::Verify(e.to_string()))
}

/// Subject common name of a DER certificate.
pub fn common_name(cert: &CertificateDer<'_>) -> Option<String> {
    let (_, parsed) = x509_parser::parse_x509_certificate(cert.as_ref()).ok()?;
    let cn = parsed.subject().iter_common_name().next()?;
    cn.as_str().ok().map(str::to_owned)
}

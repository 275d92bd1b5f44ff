//! Identity broker: verifies identity assertions, enforces group membership
//! and mints per-cluster credentials.

mod identity;
mod pki;
mod token;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use identity::{
    IdentityAssertion, IdentityError, IdpSigner, IdpVerifier, SignedAssertion, DEFAULT_REQUIRED_GROUP,
};
pub use pki::{
    certs_from_pem, common_name, crypto_provider, key_from_pem, root_store, verify_client_chain, verify_server_chain,
    ClusterCa, IssuedCert, PkiError,
};
pub use token::{decode_token, Audience, Claims, TokenError, TokenKeys, TOKEN_ISSUER};

pub const DEFAULT_TOKEN_TTL: u64 = 3600;
pub const DEFAULT_FACILITY_DOMAIN: &str = "dask.local";

#[derive(Debug, Error)]
pub enum AuthError {
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("no identity provider key configured")]
    NoIdentityProvider,
    #[error("invalid subject {0:?}")]
    BadSubject(String),
}

/// What the user receives after login. The host key stays with the facility.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialBundle {
    pub cluster_id: String,
    pub subject: String,
    pub hostname: String,
    pub ca_cert: String,
    pub host_cert: String,
    pub user_cert: String,
    pub user_key: String,
    pub batch_token: String,
    pub data_token: String,
}

impl CredentialBundle {
    /// Writes the bundle as individual files plus `bundle.json`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let files = [
            ("ca.pem", &self.ca_cert),
            ("host.pem", &self.host_cert),
            ("user.pem", &self.user_cert),
            ("user.key", &self.user_key),
            ("batch.token", &self.batch_token),
            ("data.token", &self.data_token),
        ];
        for (name, body) in files {
            fs::write(dir.join(name), body)?;
        }
        fs::write(dir.join("bundle.json"), serde_json::to_vec_pretty(self)?)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(dir.join("user.key"), fs::Permissions::from_mode(0o600))?;
        }
        Ok(())
    }

    pub fn read_from(dir: &Path) -> io::Result<Self> {
        let text = fs::read(dir.join("bundle.json"))?;
        serde_json::from_slice(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// A freshly minted cluster: the user's bundle plus the server-side host key.
#[derive(Debug, Clone)]
pub struct MintedCluster {
    pub bundle: CredentialBundle,
    pub host: IssuedCert,
}

#[derive(Debug)]
struct SubjectCluster {
    cluster_id: String,
    ca: Arc<ClusterCa>,
}

#[derive(Debug)]
pub struct Authd {
    keys: TokenKeys,
    idp: Option<IdpVerifier>,
    required_group: String,
    ttl: u64,
    domain: String,
    clusters: Mutex<BTreeMap<String, SubjectCluster>>,
}

fn valid_subject(sub: &str) -> bool {
    !sub.is_empty()
        && sub.len() <= 48
        && sub
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

impl Authd {
    pub fn new(keys: TokenKeys, idp: Option<IdpVerifier>) -> Self {
        Self {
            keys,
            idp,
            required_group: DEFAULT_REQUIRED_GROUP.to_owned(),
            ttl: DEFAULT_TOKEN_TTL,
            domain: DEFAULT_FACILITY_DOMAIN.to_owned(),
            clusters: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_required_group(mut self, group: &str) -> Self {
        self.required_group = group.to_owned();
        self
    }

    pub fn with_ttl(mut self, ttl: u64) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn with_domain(mut self, domain: &str) -> Self {
        self.domain = domain.to_owned();
        self
    }

    pub fn keys(&self) -> &TokenKeys {
        &self.keys
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn verify_identity(&self, signed: &SignedAssertion, now: u64) -> Result<String, AuthError> {
        let idp = self.idp.as_ref().ok_or(AuthError::NoIdentityProvider)?;
        Ok(idp.verify_identity(signed, &self.required_group, now)?)
    }

    /// Mints a credential bundle, reusing the subject's cluster CA if one exists.
    pub fn mint_bundle(&self, subject: &str, ttl: u64, now: u64) -> Result<MintedCluster, AuthError> {
        if !valid_subject(subject) {
            return Err(AuthError::BadSubject(subject.to_owned()));
        }
        let (cluster_id, ca) = {
            let mut clusters = self.clusters.lock().expect("authd lock");
            match clusters.get(subject) {
                Some(c) => (c.cluster_id.clone(), c.ca.clone()),
                None => {
                    let cluster_id = format!("{subject}-1");
                    let ca = Arc::new(ClusterCa::generate(&cluster_id)?);
                    clusters.insert(
                        subject.to_owned(),
                        SubjectCluster {
                            cluster_id: cluster_id.clone(),
                            ca: ca.clone(),
                        },
                    );
                    (cluster_id, ca)
                }
            }
        };
        let hostname = format!("{cluster_id}.{}", self.domain);
        let host = ca.issue_host(&cluster_id, &[hostname.clone(), "localhost".to_owned()])?;
        let user = ca.issue_user(subject)?;
        let bundle = CredentialBundle {
            cluster_id,
            subject: subject.to_owned(),
            hostname,
            ca_cert: ca.cert_pem(),
            host_cert: host.cert_pem.clone(),
            user_cert: user.cert_pem,
            user_key: user.key_pem,
            batch_token: self.keys.mint(subject, Audience::Batch, now, ttl),
            data_token: self.keys.mint(subject, Audience::Data, now, ttl),
        };
        Ok(MintedCluster { bundle, host })
    }

    /// Verify the identity assertion and mint with the configured TTL.
    pub fn login(&self, signed: &SignedAssertion, now: u64) -> Result<MintedCluster, AuthError> {
        let subject = self.verify_identity(signed, now)?;
        self.mint_bundle(&subject, self.ttl, now)
    }

    pub fn verify_token(&self, token: &str, aud: Audience, now: u64) -> Result<Claims, AuthError> {
        Ok(self.keys.verify(token, aud, now)?)
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

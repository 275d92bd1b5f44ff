//! HMAC-SHA256 facility tokens: `b64url(payload json) "." b64url(mac)`.

use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64;
use base64::Engine;
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub const TOKEN_ISSUER: &str = "casa-authd";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("malformed token")]
    Malformed,
    #[error("bad mac")]
    BadMac,
    #[error("wrong audience")]
    WrongAudience,
    #[error("expired")]
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Audience {
    Batch,
    Data,
}

impl Audience {
    pub fn as_str(self) -> &'static str {
        match self {
            Audience::Batch => "batch",
            Audience::Data => "data",
        }
    }

    fn default_scope(self) -> &'static str {
        match self {
            Audience::Batch => "condor:submit",
            Audience::Data => "storage:read",
        }
    }
}

impl fmt::Display for Audience {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Audience {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(Audience::Batch),
            "data" => Ok(Audience::Data),
            other => Err(format!("unknown audience {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claims {
    pub sub: String,
    pub iss: String,
    pub aud: Audience,
    pub iat: u64,
    pub exp: u64,
    pub scope: String,
}

/// One HMAC key per audience.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenKeys {
    batch: [u8; 32],
    data: [u8; 32],
}

impl fmt::Debug for TokenKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TokenKeys { .. }")
    }
}

fn mac_over(key: &[u8], bytes: &[u8]) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(bytes);
    mac
}

impl TokenKeys {
    pub fn generate() -> Self {
        let mut rng = rand::rngs::OsRng;
        let mut keys = Self {
            batch: [0; 32],
            data: [0; 32],
        };
        rng.fill_bytes(&mut keys.batch);
        rng.fill_bytes(&mut keys.data);
        keys
    }

    pub fn from_bytes(batch: [u8; 32], data: [u8; 32]) -> Self {
        Self { batch, data }
    }

    fn key(&self, aud: Audience) -> &[u8] {
        match aud {
            Audience::Batch => &self.batch,
            Audience::Data => &self.data,
        }
    }

    pub fn sign_claims(&self, claims: &Claims) -> String {
        let payload = serde_json::to_vec(claims).expect("claims serialize");
        self.sign_payload(claims.aud, &payload)
    }

    /// Signs raw payload bytes under the key for `aud`.
    pub fn sign_payload(&self, aud: Audience, payload: &[u8]) -> String {
        let tag = mac_over(self.key(aud), payload).finalize().into_bytes();
        format!("{}.{}", B64.encode(payload), B64.encode(tag))
    }

    pub fn mint(&self, sub: &str, aud: Audience, iat: u64, ttl: u64) -> String {
        self.sign_claims(&Claims {
            sub: sub.to_owned(),
            iss: TOKEN_ISSUER.to_owned(),
            aud,
            iat,
            exp: iat + ttl,
            scope: aud.default_scope().to_owned(),
        })
    }

    /// Decode, check the MAC under the key of the claimed audience, then the
    /// expected audience, then expiry.
    pub fn verify(&self, token: &str, aud: Audience, now: u64) -> Result<Claims, TokenError> {
        let (payload, claims, tag) = decode_token(token)?;
        mac_over(self.key(claims.aud), &payload)
            .verify_slice(&tag)
            .map_err(|_| TokenError::BadMac)?;
        if claims.aud != aud {
            return Err(TokenError::WrongAudience);
        }
        if claims.exp <= now {
            return Err(TokenError::Expired);
        }
        Ok(claims)
    }
}

/// Splits a token into payload bytes, parsed claims and MAC bytes without
/// checking anything.
pub fn decode_token(token: &str) -> Result<(Vec<u8>, Claims, Vec<u8>), TokenError> {
    let (p, t) = token.split_once('.').ok_or(TokenError::Malformed)?;
    let payload = B64.decode(p).map_err(|_| TokenError::Malformed)?;
    let tag = B64.decode(t).map_err(|_| TokenError::Malformed)?;
    let claims: Claims = serde_json::from_slice(&payload).map_err(|_| TokenError::Malformed)?;
    Ok((payload, claims, tag))
}

//! Mock identity provider: ECDSA P-256 signed assertions stored as JSON files.

use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64;
use base64::Engine;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_REQUIRED_GROUP: &str = "cms";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("malformed assertion: {0}")]
    Malformed(String),
    #[error("bad signature")]
    BadSignature,
    #[error("expired")]
    Expired,
    #[error("not a member of {0}")]
    NotMember(String),
    #[error("bad key: {0}")]
    Key(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityAssertion {
    pub sub: String,
    pub groups: Vec<String>,
    pub iat: u64,
    pub exp: u64,
}

/// The on-disk form: base64url payload JSON and a base64url fixed-size
/// (r || s) signature over the encoded payload string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedAssertion {
    pub payload: String,
    pub signature: String,
}

impl SignedAssertion {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("assertion serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IdentityError> {
        serde_json::from_str(text).map_err(|e| IdentityError::Malformed(e.to_string()))
    }

    /// Parses the payload without checking the signature.
    pub fn claims(&self) -> Result<IdentityAssertion, IdentityError> {
        let bytes = B64
            .decode(&self.payload)
            .map_err(|e| IdentityError::Malformed(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| IdentityError::Malformed(e.to_string()))
    }
}

pub struct IdpSigner {
    key: SigningKey,
}

impl IdpSigner {
    pub fn generate() -> Self {
        Self {
            key: SigningKey::random(&mut rand::rngs::OsRng),
        }
    }

    pub fn from_pem(pem: &str) -> Result<Self, IdentityError> {
        let key = SigningKey::from_pkcs8_pem(pem).map_err(|e| IdentityError::Key(e.to_string()))?;
        Ok(Self { key })
    }

    pub fn to_pem(&self) -> String {
        self.key
            .to_pkcs8_pem(LineEnding::LF)
            .expect("p256 key encodes")
            .to_string()
    }

    pub fn public_pem(&self) -> String {
        self.key
            .verifying_key()
            .to_public_key_pem(LineEnding::LF)
            .expect("p256 key encodes")
    }

    pub fn verifier(&self) -> IdpVerifier {
        IdpVerifier {
            key: *self.key.verifying_key(),
        }
    }

    pub fn sign(&self, assertion: &IdentityAssertion) -> SignedAssertion {
        let payload = B64.encode(serde_json::to_vec(assertion).expect("assertion serializes"));
        let sig: Signature = self.key.sign(payload.as_bytes());
        SignedAssertion {
            payload,
            signature: B64.encode(sig.to_bytes()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdpVerifier {
    key: VerifyingKey,
}

impl IdpVerifier {
    pub fn from_pem(pem: &str) -> Result<Self, IdentityError> {
        let key = VerifyingKey::from_public_key_pem(pem).map_err(|e| IdentityError::Key(e.to_string()))?;
        Ok(Self { key })
    }

    /// Returns the subject iff the signature is valid, the assertion is
    /// unexpired and `required_group` is among its groups.
    pub fn verify_identity(
        &self,
        signed: &SignedAssertion,
        required_group: &str,
        now: u64,
    ) -> Result<String, IdentityError> {
        let sig_bytes = B64.decode(&signed.signature).map_err(|_| IdentityError::BadSignature)?;
        let sig = Signature::from_slice(&sig_bytes).map_err(|_| IdentityError::BadSignature)?;
        self.key
            .verify(signed.payload.as_bytes(), &sig)
            .map_err(|_| IdentityError::BadSignature)?;
        let claims = signed.claims()?;
        if claims.exp <= now {
            return Err(IdentityError::Expired);
        }
        if !claims.groups.iter().any(|g| g == required_group) {
            return Err(IdentityError::NotMember(required_group.to_owned()));
        }
        if claims.sub.is_empty() {
            return Err(IdentityError::Malformed("empty subject".into()));
        }
        Ok(claims.sub)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assertion(groups: &[&str]) -> IdentityAssertion {
        IdentityAssertion {
            sub: "alice".into(),
            groups: groups.iter().map(|g| g.to_string()).collect(),
            iat: 100,
            exp: 200,
        }
    }

    #[test]
    fn membership_signature_expiry() {
        let idp = IdpSigner::generate();
        let v = idp.verifier();
        let ok = idp.sign(&assertion(&["cms"]));
        assert_eq!(v.verify_identity(&ok, "cms", 150).unwrap(), "alice");
        let atlas = idp.sign(&assertion(&["atlas"]));
        let err = v.verify_identity(&atlas, "cms", 150).unwrap_err();
        assert!(err.to_string().contains("not a member"));
        assert_eq!(v.verify_identity(&ok, "cms", 250), Err(IdentityError::Expired));

        let mut sig = B64.decode(&ok.signature).unwrap();
        sig[5] ^= 0x01;
        let flipped = SignedAssertion {
            payload: ok.payload.clone(),
            signature: B64.encode(sig),
        };
        assert_eq!(v.verify_identity(&flipped, "cms", 150), Err(IdentityError::BadSignature));
    }

    #[test]
    fn keys_round_trip_through_pem() {
        let idp = IdpSigner::generate();
        let again = IdpSigner::from_pem(&idp.to_pem()).unwrap();
        let v = IdpVerifier::from_pem(&idp.public_pem()).unwrap();
        let signed = again.sign(&assertion(&["cms"]));
        let parsed = SignedAssertion::from_json(&signed.to_json()).unwrap();
        assert_eq!(v.verify_identity(&parsed, "cms", 150).unwrap(), "alice");
        let stranger = IdpSigner::generate().verifier();
        assert_eq!(stranger.verify_identity(&parsed, "cms", 150), Err(IdentityError::BadSignature));
    }
}

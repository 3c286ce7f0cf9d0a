// SPDX-License-Identifier: Apache-2.0

//! Signed library containers.
//!
//! Layout, integers little-endian:
//! `"SBPF" | version: u16 | payload_len: u32 | payload | tag: [u8; 32]`
//! where `tag = HMAC-SHA256(key, everything before the tag)`.

use std::path::Path;

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SBPF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 10;
pub const TAG_LEN: usize = 32;
pub const KEY_LEN: usize = 32;
/// Environment variable holding the service key as 64 hex characters.
pub const KEY_ENV: &str = "SBPF_SERVICE_KEY";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IntegrityError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("malformed container: {0}")]
    MalformedContainer(&'static str),
    #[error("invalid key: {0}")]
    InvalidKey(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedLibrary {
    pub version: u16,
    pub payload: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

/// A 32-byte service key.
#[derive(Clone, PartialEq, Eq)]
pub struct ServiceKey(pub [u8; KEY_LEN]);

impl std::fmt::Debug for ServiceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ServiceKey(..)")
    }
}

impl ServiceKey {
    pub fn from_hex(text: &str) -> Result<Self, IntegrityError> {
        let bytes = hex::decode(text.trim()).map_err(|e| IntegrityError::InvalidKey(e.to_string()))?;
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|v: Vec<u8>| IntegrityError::InvalidKey(format!("{} bytes, expected {KEY_LEN}", v.len())))?;
        Ok(ServiceKey(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Read a hex key file.
    pub fn from_file(path: &Path) -> Result<Self, IntegrityError> {
        let text = std::fs::read_to_string(path).map_err(|e| IntegrityError::InvalidKey(e.to_string()))?;
        Self::from_hex(&text)
    }

    /// Key from `path` if given, otherwise from the environment.
    pub fn resolve(path: Option<&Path>) -> Result<Self, IntegrityError> {
        match path {
            Some(p) => Self::from_file(p),
            None => {
                let v = std::env::var(KEY_ENV)
                    .map_err(|_| IntegrityError::InvalidKey(format!("{KEY_ENV} is not set")))?;
                Self::from_hex(&v)
            }
        }
    }
}

fn header(version: u16, payload_len: u32) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&MAGIC);
    h[4..6].copy_from_slice(&version.to_le_bytes());
    h[6..10].copy_from_slice(&payload_len.to_le_bytes());
    h
}

fn mac(key: &ServiceKey, version: u16, payload: &[u8]) -> HmacSha256 {
    let mut m = <HmacSha256 as KeyInit>::new_from_slice(&key.0).expect("HMAC accepts any key length");
    m.update(&header(version, payload.len() as u32));
    m.update(payload);
    m
}

pub fn sign_library(payload: &[u8], key: &ServiceKey) -> Result<SignedLibrary, IntegrityError> {
    if payload.is_empty() {
        return Err(IntegrityError::EmptyPayload);
    }
    if payload.len() > u32::MAX as usize {
        return Err(IntegrityError::MalformedContainer("payload too large"));
    }
    let tag: [u8; TAG_LEN] = mac(key, VERSION, payload).finalize().into_bytes().into();
    Ok(SignedLibrary {
        version: VERSION,
        payload: payload.to_vec(),
        tag,
    })
}

/// Constant-time tag check.
pub fn verify_library(lib: &SignedLibrary, key: &ServiceKey) -> Result<bool, IntegrityError> {
    if lib.version != VERSION {
        return Err(IntegrityError::MalformedContainer("unsupported version"));
    }
    if lib.payload.is_empty() {
        return Err(IntegrityError::MalformedContainer("empty payload"));
    }
    Ok(mac(key, lib.version, &lib.payload).verify_slice(&lib.tag).is_ok())
}

impl SignedLibrary {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + TAG_LEN);
        out.extend_from_slice(&header(self.version, self.payload.len() as u32));
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IntegrityError> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(IntegrityError::MalformedContainer("truncated"));
        }
        if bytes[..4] != MAGIC {
            return Err(IntegrityError::MalformedContainer("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(IntegrityError::MalformedContainer("unsupported version"));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        if bytes.len() != HEADER_LEN + len + TAG_LEN {
            return Err(IntegrityError::MalformedContainer("length mismatch"));
        }
        if len == 0 {
            return Err(IntegrityError::MalformedContainer("empty payload"));
        }
        let tag = bytes[HEADER_LEN + len..].try_into().unwrap();
        Ok(SignedLibrary {
            version,
            payload: bytes[HEADER_LEN..HEADER_LEN + len].to_vec(),
            tag,
        })
    }
}

/// Parse and check a serialized container in one step.
pub fn verify_container(bytes: &[u8], key: &ServiceKey) -> Result<SignedLibrary, IntegrityError> {
    let lib = SignedLibrary::from_bytes(bytes)?;
    if verify_library(&lib, key)? {
        Ok(lib)
    } else {
        Err(IntegrityError::MalformedContainer("authentication tag mismatch"))
    }
}

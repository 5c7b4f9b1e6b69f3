//! Admin accounts and bearer sessions.
//!
//! Passwords are stored as salted PBKDF2-HMAC-SHA256 digests in a YAML
//! account file. Session tokens live only in memory, keyed by their SHA-256,
//! and never overlap with player session tokens.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

pub const DEFAULT_ITERATIONS: u32 = 100_000;
const TOKEN_PREFIX: &str = "vla_";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub name: String,
    pub salt: String,
    pub iterations: u32,
    pub hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounts {
    #[serde(default)]
    pub admins: Vec<Account>,
}

#[derive(Debug, thiserror::Error)]
pub enum AccountError {
    #[error("cannot read account file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("account file {path} is malformed: {message}")]
    Format { path: String, message: String },
}

fn digest(password: &str, salt: &[u8], iterations: u32) -> [u8; 32] {
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, iterations, &mut out);
    out
}

impl Account {
    pub fn new(name: &str, password: &str, iterations: u32) -> Self {
        let mut salt = [0u8; 16];
        rand::rng().fill_bytes(&mut salt);
        Self {
            name: name.to_string(),
            salt: hex::encode(salt),
            iterations,
            hash: hex::encode(digest(password, &salt, iterations)),
        }
    }

    pub fn verify(&self, password: &str) -> bool {
        let (Ok(salt), Ok(want)) = (hex::decode(&self.salt), hex::decode(&self.hash)) else {
            return false;
        };
        let got = digest(password, &salt, self.iterations);
        bool::from(got.as_slice().ct_eq(&want))
    }
}

impl Accounts {
    pub fn load(path: &Path) -> Result<Self, AccountError> {
        let text = std::fs::read_to_string(path).map_err(|source| AccountError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_yaml::from_str(&text).map_err(|e| AccountError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("accounts serialize")
    }

    /// Adds or replaces the named account.
    pub fn upsert(&mut self, account: Account) {
        self.admins.retain(|a| a.name != account.name);
        self.admins.push(account);
    }

    /// Checks a credential. Every account is hashed so the time taken does
    /// not reveal whether the name exists.
    pub fn check(&self, name: &str, password: &str) -> bool {
        let mut ok = false;
        for a in &self.admins {
            let name_ok = bool::from(a.name.as_bytes().ct_eq(name.as_bytes()));
            let pw_ok = a.verify(password);
            ok |= name_ok & pw_ok;
        }
        ok
    }
}

#[derive(Debug)]
struct AdminSession {
    admin: String,
    expires_at: u64,
}

/// Issued admin bearer tokens.
#[derive(Debug)]
pub struct AdminAuth {
    accounts: Accounts,
    ttl_ms: u64,
    sessions: Mutex<HashMap<[u8; 32], AdminSession>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssuedToken {
    pub token: String,
    pub admin: String,
    pub expires_at: u64,
}

impl AdminAuth {
    pub fn new(accounts: Accounts, ttl_ms: u64) -> Self {
        Self {
            accounts,
            ttl_ms,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn login(&self, name: &str, password: &str, now: u64) -> Option<IssuedToken> {
        if !self.accounts.check(name, password) {
            return None;
        }
        let mut raw = [0u8; 32];
        rand::rng().fill_bytes(&mut raw);
        let token = format!("{TOKEN_PREFIX}{}", hex::encode(raw));
        let expires_at = now + self.ttl_ms;
        let mut sessions = self.sessions.lock().expect("admin sessions poisoned");
        sessions.retain(|_, s| s.expires_at > now);
        sessions.insert(
            Sha256::digest(token.as_bytes()).into(),
            AdminSession {
                admin: name.to_string(),
                expires_at,
            },
        );
        Some(IssuedToken {
            token,
            admin: name.to_string(),
            expires_at,
        })
    }

    /// The admin a live token belongs to.
    pub fn verify(&self, token: &str, now: u64) -> Option<String> {
        if !token.starts_with(TOKEN_PREFIX) {
            return None;
        }
        let key: [u8; 32] = Sha256::digest(token.as_bytes()).into();
        let sessions = self.sessions.lock().expect("admin sessions poisoned");
        sessions
            .get(&key)
            .filter(|s| s.expires_at > now)
            .map(|s| s.admin.clone())
    }
}

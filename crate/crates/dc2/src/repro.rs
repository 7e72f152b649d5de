//! Reproducibility header printed by every run.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// First 16 hex digits of the SHA-256 of the compact JSON encoding of
/// `config`. Struct fields serialize in declaration order, so the hash is
/// stable for a given build.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Header {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// `None` for runs that do not involve a checkpoint.
    pub checkpoint: Option<String>,
}

impl std::fmt::Display for Header {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "# dc2 {} seed={} config_hash={} checkpoint={}",
            self.command,
            self.seed,
            self.config_hash,
            self.checkpoint.as_deref().unwrap_or("none")
        )
    }
}

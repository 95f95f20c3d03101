use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const TOOL: &str = "sdid";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance block attached to every output.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

impl Meta {
    /// Hashes the serialized command configuration together with the contents of
    /// every input file, so a changed input changes the hash.
    pub fn new<C: Serialize>(command: &str, config: &C, inputs: &[&Path], seed: u64) -> Result<Self, CliError> {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(serde_json::to_vec(config)?);
        for p in inputs {
            h.update(file_digest(p)?.as_bytes());
        }
        Ok(Self { tool: TOOL, version: VERSION, config_hash: hex(&h.finalize()), seed })
    }

    /// Comment line placed above CSV headers.
    pub fn csv_comment(&self) -> String {
        format!("# {} {} config_hash={} seed={}\n", self.tool, self.version, self.config_hash, self.seed)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(digest(&bytes))
}

//! Provenance stamps shared by every persisted artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Crate version written into artifact headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed and configuration digest that produced an artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub seed: u64,
    pub config_hash: [u8; 32],
}

impl Stamp {
    pub fn new<T: Serialize + ?Sized>(seed: u64, config: &T) -> Self {
        Self {
            seed,
            config_hash: hash_config(config),
        }
    }

    pub fn hash_hex(&self) -> String {
        to_hex(&self.config_hash)
    }

    /// Comment line placed before the header row of CSV artifacts.
    pub fn csv_comment(&self) -> String {
        format!("# evitraffic {VERSION} seed={} config={}", self.seed, self.hash_hex())
    }
}

/// SHA-256 of the JSON serialisation of `config`.
pub fn hash_config<T: Serialize + ?Sized>(config: &T) -> [u8; 32] {
    let bytes = serde_json::to_vec(config).expect("configuration serialises to JSON");
    Sha256::digest(&bytes).into()
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

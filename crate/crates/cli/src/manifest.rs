//! Run manifest written next to every command's output.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use droopguard::config::Config;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Serialize)]
pub struct Manifest {
    command: String,
    config: String,
    seed: u64,
    /// Git-style (SHA-256 object format) blob hashes of the inputs.
    artifacts: Vec<(String, String)>,
    out_dir: String,
    started_unix: u64,
    finished_unix: Option<u64>,
    version: String,
}

/// Hash of `data` as git would store it as a blob in a SHA-256 repository.
pub fn blob_hash(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", data.len()).as_bytes());
    h.update(data);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Manifest {
    pub fn start(command: &str, config: &str, cfg: &Config, seed: u64, out: &Path) -> Self {
        let feeder_text = match cfg.feeder_path() {
            None => droopguard::feeder::IEEE37_BALANCED.as_bytes().to_vec(),
            Some(p) => fs::read(p).unwrap_or_default(),
        };
        Self {
            command: command.into(),
            config: config.into(),
            seed,
            artifacts: vec![
                (cfg.feeder.clone(), blob_hash(&feeder_text)),
                ("config".into(), blob_hash(cfg.to_toml().as_bytes())),
            ],
            out_dir: out.display().to_string(),
            started_unix: now(),
            finished_unix: None,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn finish(&mut self, out: &Path) -> Result<(), Failure> {
        self.finished_unix = Some(now());
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let path = out.join("manifest.json");
        fs::write(&path, text + "\n").map_err(|e| crate::io_err(&path, e))
    }
}

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub args: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    /// SHA-256 of the canonical JSON of every structured input.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub version: &'static str,
    pub core_version: &'static str,
}

pub fn hash_json(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("JSON values always serialise");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_run_record(dir: &Path, command: &str, seed: u64, threads: usize, config: serde_json::Value) -> std::io::Result<()> {
    let record = RunRecord {
        command,
        args: std::env::args().skip(1).collect(),
        seed,
        threads,
        config_hash: hash_json(&config),
        config,
        version: env!("CARGO_PKG_VERSION"),
        core_version: bkd_core::VERSION,
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record).expect("record serialises"))
}

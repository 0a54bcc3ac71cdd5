use std::path::Path;
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// Run record written next to every command's outputs.
pub struct Manifest {
    table: Table,
    started: Instant,
}

fn git_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut table = Table::new();
        table.insert("command".into(), Value::String(command.into()));
        let args: Vec<Value> = std::env::args().map(Value::String).collect();
        table.insert("argv".into(), Value::Array(args));
        table.insert("git_revision".into(), Value::String(git_revision()));
        table.insert("fm_version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        let unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        table.insert("started_unix".into(), Value::Integer(unix as i64));
        Self {
            table,
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.table.insert("seed".into(), Value::String(seed.to_string()));
    }

    /// Records the effective config text and its SHA-256.
    pub fn config(&mut self, text: &str) {
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        self.table.insert("config_sha256".into(), Value::String(hash));
        self.table.insert("config".into(), Value::String(text.into()));
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.table.insert(key.into(), value.into());
    }

    pub fn write(mut self, out: &Path) -> Result<()> {
        let wall = self.started.elapsed().as_secs_f64();
        self.table.insert("wall_clock_s".into(), Value::Float(wall));
        std::fs::write(out.join("manifest.toml"), toml::to_string(&self.table)?)?;
        Ok(())
    }
}

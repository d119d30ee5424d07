use std::path::Path;
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::failure::{to_json, write, Failure};

/// Written once per run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: String,
    pub git_describe: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(command: &str, argv: &[String], config: Option<&Path>, seed: Option<u64>, out: &Path) -> Self {
        RunManifest {
            command: command.into(),
            argv: argv.to_vec(),
            config: config.map(|p| p.display().to_string()),
            seed,
            out_dir: out.display().to_string(),
            git_describe: git_describe(),
            started_unix: now(),
            finished_unix: 0.0,
        }
    }

    pub fn finish(mut self, out: &Path) -> Result<(), Failure> {
        self.finished_unix = now();
        write(&out.join("manifest.json"), to_json(&self))
    }
}

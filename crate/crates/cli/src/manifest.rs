//! Machine-readable record of a command invocation.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::Config;

#[derive(Debug, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub tool_version: String,
    pub library_version: String,
    pub started_unix: u64,
    pub config: Config,
    pub config_sha256: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub timings: Vec<Timing>,
    pub total_seconds: f64,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl Manifest {
    pub fn start(command: &str, config: &Config) -> Self {
        Self {
            command: command.into(),
            arguments: std::env::args().skip(1).collect(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            library_version: pose_mfa::VERSION.into(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            config: config.clone(),
            config_sha256: config.hash(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            total_seconds: 0.0,
            clock: Some(Instant::now()),
        }
    }

    /// Runs `f` and records how long it took.
    pub fn time<R>(&mut self, stage: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let out = f();
        self.timings.push(Timing {
            stage: stage.into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(mut self, dir: &Path) -> anyhow::Result<PathBuf> {
        if let Some(clock) = self.clock {
            self.total_seconds = clock.elapsed().as_secs_f64();
        }
        let path = dir.join(format!("manifest-{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(path)
    }
}

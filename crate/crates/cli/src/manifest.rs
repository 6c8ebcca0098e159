use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::exit::{CliResult, Context};

/// Everything needed to rerun a command: its arguments, the fully
/// defaulted configs, seeds and file paths.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub args: Value,
    pub configs: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

pub struct Recorder {
    command: String,
    args: Value,
    started_unix_secs: u64,
    clock: Instant,
}

impl Recorder {
    pub fn start(command: &str, args: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            args: serde_json::to_value(args).unwrap_or(Value::Null),
            started_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            clock: Instant::now(),
        }
    }

    pub fn finish(
        self,
        configs: Value,
        seeds: Vec<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        path: &Path,
    ) -> CliResult {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            args: self.args,
            configs,
            seeds,
            inputs,
            outputs,
            started_unix_secs: self.started_unix_secs,
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        linknet::train::checkpoint::write_atomic(path, text.as_bytes()).at(path)
    }
}

/// `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

/// `<out>.<suffix>`, keeping the full original file name.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

use std::fs;
use std::path::{Path, PathBuf};

use pdecalib::RunConfig;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// What a command reports: the one-line summary and the structured
/// summary stored in the manifest.
pub struct Summary {
    pub line: String,
    pub data: Value,
}

/// Output directory of one run, named by a deterministic run id.
pub struct RunDir {
    pub dir: PathBuf,
    pub run_id: String,
    command: String,
    preset: Option<String>,
    config: Value,
    artifacts: Vec<String>,
}

/// `command-label-hash`, where the hash covers the command and the
/// resolved configuration except the worker count.
pub fn run_id(command: &str, preset: Option<&str>, cfg: &RunConfig) -> String {
    let mut keyed = cfg.clone();
    keyed.jobs = None;
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update([0]);
    hasher.update(keyed.to_json().as_bytes());
    let digest = hasher.finalize();
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("{command}-{}-{hex}", preset.unwrap_or("custom"))
}

impl RunDir {
    pub fn create(root: &Path, command: &str, preset: Option<&str>, cfg: &RunConfig) -> Result<Self, CliError> {
        let run_id = run_id(command, preset, cfg);
        let dir = root.join(&run_id);
        Ok(RunDir {
            dir,
            run_id,
            command: command.to_string(),
            preset: preset.map(str::to_string),
            config: serde_json::to_value(cfg).expect("configuration serializes"),
            artifacts: Vec::new(),
        })
    }

    /// Writes an artifact, creating the run directory on first use.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", self.dir.display())))?;
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    /// Writes `manifest.json` and returns the summary line.
    pub fn finish(mut self, summary: &Summary) -> Result<String, CliError> {
        let manifest = json!({
            "command": self.command,
            "run_id": self.run_id,
            "preset": self.preset,
            "config": self.config,
            "artifacts": self.artifacts,
            "summary": summary.data,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        self.write("manifest.json", text)?;
        Ok(format!("{} {} out={}", self.run_id, summary.line, self.dir.display()))
    }
}

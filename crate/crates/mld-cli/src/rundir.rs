use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{runtime, CliResult};

/// A run directory: `config.json` with the resolved configuration,
/// `checkpoints/`, `samples/`, `metrics/`, and an append-only `log.jsonl`
/// with one JSON event per training epoch.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> CliResult<RunDir> {
        for sub in ["checkpoints", "samples", "metrics"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir)
                .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        }
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    /// Echo the resolved configuration so the run is reproducible from the
    /// directory alone.
    pub fn write_config(&self, cfg: &RunConfig) -> CliResult<()> {
        let path = self.root.join("config.json");
        let text = serde_json::to_string_pretty(cfg)
            .map_err(|e| runtime(format!("cannot serialize config: {e}")))?;
        fs::write(&path, text + "\n")
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    }

    /// Append one event to `log.jsonl`.
    pub fn log_event(&self, event: &serde_json::Value) -> CliResult<()> {
        let path = self.root.join("log.jsonl");
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| runtime(format!("cannot open {}: {e}", path.display())))?;
        let line = serde_json::to_string(event)
            .map_err(|e| runtime(format!("cannot serialize log event: {e}")))?;
        writeln!(file, "{line}").map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn creates_layout_and_appends_log() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::create(dir.path()).unwrap();
        assert!(rd.checkpoints().is_dir());
        assert!(rd.samples().is_dir());
        assert!(rd.metrics().is_dir());

        rd.write_config(&RunConfig::default()).unwrap();
        let text = fs::read_to_string(dir.path().join("config.json")).unwrap();
        let parsed: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, RunConfig::default());

        rd.log_event(&serde_json::json!({"epoch": 0})).unwrap();
        rd.log_event(&serde_json::json!({"epoch": 1})).unwrap();
        let log = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
    }
}

//! Per-run manifest, written to `<out>/run_manifest.json` before a command
//! does any work and rewritten with the outcome when it finishes.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceFingerprint {
    pub package: String,
    pub version: String,
    pub git_commit: Option<String>,
    pub git_dirty: Option<bool>,
}

impl SourceFingerprint {
    pub fn current() -> Self {
        let git = |args: &[&str]| {
            Command::new("git")
                .args(args)
                .current_dir(env!("CARGO_MANIFEST_DIR"))
                .output()
                .ok()
                .filter(|o| o.status.success())
                .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        };
        Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_commit: git(&["rev-parse", "HEAD"]),
            git_dirty: git(&["status", "--porcelain"]).map(|s| !s.is_empty()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub source: SourceFingerprint,
    pub output_dir: PathBuf,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    /// `ok`, or the error that ended the run.
    pub status: Option<String>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, argv: Vec<String>, config_path: Option<&Path>, config: &RunConfig, out: &Path) -> Self {
        Self {
            command: command.into(),
            argv,
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            source: SourceFingerprint::current(),
            output_dir: out.to_path_buf(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            status: None,
        }
    }

    pub fn write(&self) -> Result<()> {
        let p = self.output_dir.join(RUN_MANIFEST);
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(Error::io(&p))
    }

    pub fn finish(&mut self, status: std::result::Result<(), String>) -> Result<()> {
        self.finished_unix_ms = Some(now_ms());
        self.status = Some(match status {
            Ok(()) => "ok".into(),
            Err(e) => e,
        });
        self.write()
    }

    pub fn read(out: &Path) -> Result<Self> {
        let p = out.join(RUN_MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(Error::io(&p))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Creates `out`; an existing non-empty directory needs `force`.
pub fn prepare_output_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out).map_err(Error::io(out))?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(out.to_path_buf()));
        }
    }
    std::fs::create_dir_all(out).map_err(Error::io(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_records_outcome() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::toy().with_seed(4);
        let mut m = RunManifest::start("pretrain", vec!["radgan".into()], None, &cfg, dir.path());
        m.write().unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap().status, None);
        m.finish(Ok(())).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back.status.as_deref(), Some("ok"));
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn existing_output_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        prepare_output_dir(dir.path(), false).unwrap();
        std::fs::write(dir.path().join("x"), "1").unwrap();
        assert!(matches!(
            prepare_output_dir(dir.path(), false),
            Err(Error::OutputExists(_))
        ));
        prepare_output_dir(dir.path(), true).unwrap();
    }
}

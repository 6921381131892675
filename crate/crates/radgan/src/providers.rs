//! External metric programs behind the provider interface.

use std::process::Command;

use radgan_core::audio::WaveformSegment;
use radgan_core::evaluation::{Metric, MetricProvider, ProviderRegistry};

use crate::config::{CommandProviderSpec, EvaluationConfig};
use crate::wav::write_wav;

/// Runs `argv` with `{clean}` and `{enhanced}` replaced by temporary WAV
/// paths and reads the score from the last non-empty stdout line.
#[derive(Clone, Debug)]
pub struct CommandProvider {
    metric: Metric,
    argv: Vec<String>,
}

impl CommandProvider {
    pub fn new(spec: &CommandProviderSpec) -> Self {
        Self {
            metric: spec.metric,
            argv: spec.command.clone(),
        }
    }
}

impl MetricProvider for CommandProvider {
    fn metric(&self) -> Metric {
        self.metric
    }

    fn evaluate(&self, clean: &WaveformSegment, enhanced: &WaveformSegment) -> Result<f64, String> {
        let (program, args) = self.argv.split_first().ok_or("empty command")?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let c = dir.path().join("clean.wav");
        let e = dir.path().join("enhanced.wav");
        write_wav(&c, clean).map_err(|e| e.to_string())?;
        write_wav(&e, enhanced).map_err(|e| e.to_string())?;
        let args: Vec<String> = args
            .iter()
            .map(|a| {
                a.replace("{clean}", &c.to_string_lossy())
                    .replace("{enhanced}", &e.to_string_lossy())
            })
            .collect();
        let out = Command::new(program)
            .args(&args)
            .output()
            .map_err(|e| format!("{program}: {e}"))?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            return Err(format!("{program} exited with {}: {}", out.status, stderr.trim()));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let last = stdout.lines().rev().find(|l| !l.trim().is_empty()).ok_or("no output")?;
        last.trim()
            .parse::<f64>()
            .map_err(|_| format!("unparseable score {last:?}"))
    }
}

pub fn registry_from_config(cfg: &EvaluationConfig) -> ProviderRegistry {
    let mut r = ProviderRegistry::new();
    for (id, spec) in &cfg.providers {
        r.register(id.clone(), Box::new(CommandProvider::new(spec)));
    }
    r
}

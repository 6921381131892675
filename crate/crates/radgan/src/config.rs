//! Run configuration.
//!
//! One TOML file holds every hyperparameter. Resolution order: built-in
//! profile defaults, then the file (deep-merged, so partial files are fine),
//! then `RADGAN_`-prefixed environment variables, then command-line flags.
//! Environment keys use `__` between path segments, so
//! `RADGAN_PRETRAIN__LR=3e-4` sets `pretrain.lr`.
//!
//! The root `seed` is the only source of randomness. Per-stage seeds inside
//! the training sections are overwritten with values derived from it.

use std::collections::BTreeMap;
use std::path::Path;

use radgan_core::data::{DegradationSpec, SplitRule, TaskTag, CLIP_LEN};
use radgan_core::evaluation::Metric;
use radgan_core::rng::derive_seed;
use radgan_core::training::{Phase, TrainingConfig, WvnTrainConfig};
use radgan_core::wvn::WvnConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "RADGAN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Toy,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "toy" => Ok(Self::Toy),
            other => Err(Error::Config(format!("unknown profile {other:?} (paper | toy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Clips written by `synth-data`.
    pub clips: usize,
    /// Every clip is clipped or zero-padded to this length on load.
    pub clip_len: usize,
    /// Tag for corpora without a manifest.
    pub task: TaskTag,
    pub split: SplitRule,
    pub degradation: DegradationSpec,
}

/// An external program that scores one pair. `{clean}` and `{enhanced}` in
/// the arguments are replaced by WAV paths; the last line of stdout must be
/// the score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandProviderSpec {
    pub metric: Metric,
    pub command: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    /// Parallel pair workers; 0 means one per CPU. Determinism mode forces 1.
    pub workers: usize,
    pub providers: BTreeMap<String, CommandProviderSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub determinism: bool,
    /// Metric-log records between flushes.
    pub log_interval: u64,
    /// Optimizer steps between checkpoints (WVN: epochs).
    pub checkpoint_interval: u64,
    pub data: DataConfig,
    pub pretrain: TrainingConfig,
    pub wvn: WvnConfig,
    pub wvn_train: WvnTrainConfig,
    pub finetune: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            seed: 0,
            determinism: false,
            log_interval: 50,
            checkpoint_interval: 5000,
            data: DataConfig {
                clips: 100,
                clip_len: CLIP_LEN,
                task: TaskTag::Synthetic,
                split: SplitRule::Ratio(0.875),
                degradation: DegradationSpec::default(),
            },
            pretrain: TrainingConfig::paper(Phase::Pretrain),
            wvn: WvnConfig::paper(),
            wvn_train: WvnTrainConfig::default(),
            finetune: TrainingConfig::paper(Phase::Finetune),
            evaluation: EvaluationConfig {
                workers: 0,
                providers: BTreeMap::new(),
            },
        }
    }

    pub fn toy() -> Self {
        let paper = Self::paper();
        Self {
            profile: Profile::Toy,
            log_interval: 10,
            checkpoint_interval: 50,
            data: DataConfig {
                clips: 16,
                clip_len: 4096,
                ..paper.data
            },
            pretrain: TrainingConfig::toy(Phase::Pretrain),
            wvn: WvnConfig::toy(),
            wvn_train: WvnTrainConfig {
                batch_size: 2,
                accumulation: 2,
                epochs: 2,
                crop_len: 2048,
                ..WvnTrainConfig::default()
            },
            finetune: TrainingConfig::toy(Phase::Finetune),
            ..paper
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Toy => Self::toy(),
        }
    }

    /// Defaults for `profile`, overlaid with `file` and the environment.
    pub fn load(
        profile: Option<Profile>,
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p).map_err(Error::io(p))?,
            None => String::new(),
        };
        Self::from_sources(profile, &text, env)
    }

    pub fn from_sources(
        profile: Option<Profile>,
        file_text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(file_text).map_err(|e| Error::Config(e.to_string()))?;
        let env: Vec<(Vec<String>, Value)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_lowercase(), v)))
            .map(|(k, v)| (k.split("__").map(str::to_string).collect(), parse_env_value(&v)))
            .collect();

        let profile = match (
            profile,
            overlay.get("profile"),
            env.iter().find(|(p, _)| p == &["profile"]),
        ) {
            (Some(p), _, _) => p,
            (None, _, Some((_, Value::String(s)))) => Profile::parse(s)?,
            (None, Some(Value::String(s)), _) => Profile::parse(s)?,
            (None, Some(other), _) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            _ => Profile::Paper,
        };

        let mut merged = Value::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let mut touched = Vec::new();
        merge(&mut merged, Value::Table(overlay), &mut Vec::new(), &mut touched);
        for (path, value) in env {
            set_path(&mut merged, &path, value)?;
            touched.push(path);
        }
        if let Value::Table(t) = &mut merged {
            t.insert(
                "profile".into(),
                Value::try_from(profile).map_err(|e| Error::Config(e.to_string()))?,
            );
        }

        let cfg: RunConfig = merged.try_into().map_err(|e| Error::Config(e.to_string()))?;
        let echo = Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(bad) = touched.iter().find(|p| lookup(&echo, p).is_none()) {
            return Err(Error::Config(format!("unknown configuration key {}", bad.join("."))));
        }
        let mut cfg = cfg;
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Re-derives every stage seed from the root seed.
    pub fn resolve_seeds(&mut self) {
        self.pretrain.seed = derive_seed(self.seed, "pretrain", 0);
        self.finetune.seed = derive_seed(self.seed, "finetune", 0);
        self.wvn_train.seed = derive_seed(self.seed, "wvn_train", 0);
        self.pretrain.phase = Phase::Pretrain;
        self.finetune.phase = Phase::Finetune;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve_seeds();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.wvn.validate()?;
        self.wvn_train.validate()?;
        self.data.degradation.validate(radgan_core::SAMPLE_RATE)?;
        if self.data.clip_len == 0 || self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config(
                "data.clip_len, log_interval and checkpoint_interval must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn parse_env_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(dst: &mut Value, src: Value, path: &mut Vec<String>, touched: &mut Vec<Vec<String>>) {
    match (dst, src) {
        (Value::Table(d), Value::Table(s)) => {
            for (k, v) in s {
                path.push(k.clone());
                match d.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v, path, touched),
                    _ => {
                        touched.push(path.clone());
                        d.insert(k, v);
                    }
                }
                path.pop();
            }
        }
        (d, s) => *d = s,
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut node = root;
    for p in parents {
        node = node
            .get_mut(p.as_str())
            .filter(|n| n.is_table())
            .ok_or_else(|| Error::Config(format!("unknown configuration key {}", path.join("."))))?;
    }
    match node {
        Value::Table(t) => {
            t.insert(last.clone(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("unknown configuration key {}", path.join(".")))),
    }
}

fn lookup<'a>(v: &'a Value, path: &[String]) -> Option<&'a Value> {
    path.iter().try_fold(v, |node, k| node.get(k.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn defaults_echo_paper_values() {
        let c = RunConfig::from_sources(None, "", none()).unwrap();
        assert_eq!(c.profile, Profile::Paper);
        assert_eq!(c.pretrain.lr, 1e-4);
        assert_eq!(c.finetune.betas, (0.9, 0.99));
        assert_eq!(c.finetune.batch_size, 16);
        assert_eq!(c.data.degradation.snr_db_range, (-5.0, -1.0));
        assert_eq!((c.wvn_train.epochs, c.wvn_train.accumulation), (30, 8));
    }

    #[test]
    fn partial_file_then_env_wins() {
        let file = "profile = \"toy\"\n[pretrain]\nlr = 0.002\nmax_steps = 7\n";
        let env = vec![
            ("RADGAN_PRETRAIN__LR".to_string(), "5e-4".to_string()),
            ("RADGAN_FINETUNE__ABLATION__USE_MMD".to_string(), "false".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = RunConfig::from_sources(None, file, env).unwrap();
        assert_eq!(c.profile, Profile::Toy);
        assert_eq!(c.pretrain.lr, 5e-4);
        assert_eq!(c.pretrain.max_steps, 7);
        assert!(!c.finetune.ablation.use_mmd);
        assert_eq!(c.pretrain.batch_size, RunConfig::toy().pretrain.batch_size);
    }

    #[test]
    fn optional_keys_can_be_set() {
        let c = RunConfig::from_sources(
            Some(Profile::Toy),
            "[finetune]\ngrad_clip = 10.0\nmax_epochs = 3\n",
            none(),
        )
        .unwrap();
        assert_eq!(c.finetune.grad_clip, Some(10.0));
        assert_eq!(c.finetune.max_epochs, Some(3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_sources(None, "[pretrain]\nlearning_rate = 1.0\n", none()).unwrap_err();
        assert!(e.to_string().contains("pretrain.learning_rate"), "{e}");
        let env = vec![("RADGAN_NOPE__X".to_string(), "1".to_string())];
        assert!(RunConfig::from_sources(None, "", env).is_err());
    }

    #[test]
    fn stage_seeds_follow_the_root() {
        let a = RunConfig::toy().with_seed(1);
        let b = RunConfig::toy().with_seed(2);
        assert_ne!(a.pretrain.seed, b.pretrain.seed);
        assert_ne!(a.pretrain.seed, a.finetune.seed);
        let file = format!("seed = 1\n[pretrain]\nseed = 99\n");
        let c = RunConfig::from_sources(Some(Profile::Toy), &file, none()).unwrap();
        assert_eq!(c.pretrain.seed, a.pretrain.seed);
    }

    #[test]
    fn serialized_config_loads_back_identically() {
        let c = RunConfig::toy().with_seed(3);
        let text = toml::to_string(&RunConfig {
            seed: 3,
            ..RunConfig::toy()
        })
        .unwrap();
        assert_eq!(RunConfig::from_sources(None, &text, none()).unwrap(), c);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::from_sources(None, "[pretrain]\nlr = -1.0\n", none()).is_err());
        assert!(RunConfig::from_sources(None, "profile = \"huge\"\n", none()).is_err());
    }
}

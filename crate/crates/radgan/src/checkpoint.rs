//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! a JSON header, then every tensor as raw `f64` LE in header order. The
//! header records per-section fingerprints (SHA-256 of the model-relevant
//! configuration), the configuration snapshot, training progress, counters
//! and the tensor index. Serialization is canonical, so save, load and save
//! again reproduce the same bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use radgan_core::discriminators::DiscriminatorSet;
use radgan_core::fusion_gate::{init_gate, FusionGateParams};
use radgan_core::generator::{Generator, GeneratorConfig};
use radgan_core::nn::Module;
use radgan_core::optim::AdamState;
use radgan_core::rng::seeded;
use radgan_core::training::{Finetuner, Phase, Pretrainer, Progress, TrainingConfig, WvnTrainer};
use radgan_core::wvn::{WvnConfig, WvnModel};
use radgan_core::{Tensor, N_MELS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RADGANCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Pretrain,
    Finetune,
    Wvn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    fingerprints: BTreeMap<String, String>,
    config: serde_json::Value,
    progress: Option<Progress>,
    counters: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

/// Everything in one checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub fingerprints: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub progress: Option<Progress>,
    pub counters: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn generator_fingerprint(cfg: &TrainingConfig) -> String {
    fingerprint(&serde_json::json!({
        "generator": cfg.generator,
        "stft": cfg.stft,
        "conditioning_mel": cfg.conditioning_mel,
    }))
}

pub fn discriminator_fingerprint(cfg: &TrainingConfig) -> String {
    fingerprint(&serde_json::json!({
        "discriminators": cfg.discriminators,
        "families": cfg.ablation.families(),
        "loss": cfg.loss,
        "stft": cfg.stft,
    }))
}

pub fn gate_fingerprint() -> String {
    fingerprint(&serde_json::json!({ "n_mels": N_MELS }))
}

pub fn wvn_fingerprint(cfg: &WvnConfig) -> String {
    fingerprint(cfg)
}

/// Everything that must agree for a resumed run to continue the same
/// trajectory. Step and epoch budgets may change between sessions.
pub fn trainer_fingerprint(cfg: &TrainingConfig) -> String {
    let mut c = cfg.clone();
    c.max_steps = 0;
    c.max_epochs = None;
    fingerprint(&c)
}

impl Checkpoint {
    fn new(kind: Kind, config: serde_json::Value) -> Self {
        Self {
            kind,
            fingerprints: BTreeMap::new(),
            config,
            progress: None,
            counters: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            fingerprints: self.fingerprints.clone(),
            config: self.config.clone(),
            progress: self.progress,
            counters: self.counters.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let numel: usize = self.tensors.values().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = || Error::BadMagic {
            path: origin.to_path_buf(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        let mut payload = body[header_len..].chunks_exact(8);
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let data: Vec<f64> = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.len() != n {
                return Err(Error::Checkpoint(format!("truncated payload in {}", entry.name)));
            }
            tensors.insert(entry.name, Tensor::new(&entry.shape, data)?);
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self {
            kind: header.kind,
            fingerprints: header.fingerprints,
            config: header.config,
            progress: header.progress,
            counters: header.counters,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("ckpt.partial");
        let mut f = std::fs::File::create(&tmp).map_err(Error::io(&tmp))?;
        f.write_all(&bytes).map_err(Error::io(&tmp))?;
        f.sync_all().map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn require_kind(&self, allowed: &[Kind]) -> Result<()> {
        if allowed.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a {allowed:?} checkpoint, found {:?}",
                self.kind
            )))
        }
    }

    pub fn check_fingerprint(&self, section: &str, expected: &str) -> Result<()> {
        match self.fingerprints.get(section) {
            Some(found) if found == expected => Ok(()),
            Some(found) => Err(Error::Fingerprint {
                section: section.into(),
                checkpoint: found.clone(),
                config: expected.into(),
            }),
            None => Err(Error::Checkpoint(format!("no {section} section"))),
        }
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.fingerprints.contains_key(section)
    }

    fn config_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .config
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks config.{key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    fn counter(&self, key: &str) -> Result<u64> {
        self.counters
            .get(key)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("header lacks counter {key}")))
    }

    fn put_module(&mut self, section: &str, m: &dyn Module) {
        m.visit_params(&mut |p| {
            self.tensors.insert(format!("{section}/{}", p.name), p.value.clone());
        });
    }

    fn put_buffers(&mut self, section: &str, m: &mut dyn Module) {
        m.visit_buffers_mut(&mut |name, buf| {
            let t = Tensor::new(&[buf.len()], buf.clone()).expect("1-D buffer");
            self.tensors.insert(format!("{section}.buffer/{name}"), t);
        });
    }

    fn put_adam(&mut self, section: &str, s: &AdamState) {
        self.counters.insert(format!("{section}.step"), s.step);
        for (prefix, moments) in [("m", &s.m), ("v", &s.v)] {
            for (name, data) in moments {
                let t = Tensor::new(&[data.len()], data.clone()).expect("1-D moment");
                self.tensors.insert(format!("{section}.{prefix}/{name}"), t);
            }
        }
    }

    /// Copies every `section/<param>` tensor into `m` by name. Missing,
    /// extra or misshapen tensors are errors.
    pub fn load_params(&self, section: &str, m: &mut dyn Module) -> Result<()> {
        let prefix = format!("{section}/");
        let mut problems = Vec::new();
        let mut seen = 0usize;
        m.visit_params_mut(&mut |p| match self.tensors.get(&format!("{prefix}{}", p.name)) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value = t.clone();
                seen += 1;
            }
            Some(t) => problems.push(format!("{}: shape {:?} vs {:?}", p.name, t.shape(), p.value.shape())),
            None => problems.push(format!("{}: missing", p.name)),
        });
        let stored = self.tensors.keys().filter(|k| k.starts_with(&prefix)).count();
        if problems.is_empty() && stored != seen {
            problems.push(format!("{} unexpected tensors", stored - seen));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{section}: {}", problems.join("; "))))
        }
    }

    fn load_buffers(&self, section: &str, m: &mut dyn Module) -> Result<()> {
        let mut problems = Vec::new();
        m.visit_buffers_mut(
            &mut |name, buf| match self.tensors.get(&format!("{section}.buffer/{name}")) {
                Some(t) if t.numel() == buf.len() => buf.copy_from_slice(t.data()),
                _ => problems.push(name.to_string()),
            },
        );
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{section}: bad buffers {problems:?}")))
        }
    }

    fn adam(&self, section: &str) -> Result<AdamState> {
        let mut s = AdamState {
            step: self.counter(&format!("{section}.step"))?,
            ..Default::default()
        };
        for (prefix, moments) in [("m", &mut s.m), ("v", &mut s.v)] {
            let p = format!("{section}.{prefix}/");
            for (k, t) in self.tensors.range(p.clone()..) {
                let Some(name) = k.strip_prefix(&p) else { break };
                moments.insert(name.to_string(), t.data().to_vec());
            }
        }
        Ok(s)
    }
}

fn training_snapshot(cfg: &TrainingConfig, wvn: Option<&WvnConfig>) -> serde_json::Value {
    serde_json::json!({ "training": cfg, "wvn": wvn })
}

pub fn pretrainer_checkpoint(t: &Pretrainer) -> Checkpoint {
    let mut c = Checkpoint::new(Kind::Pretrain, training_snapshot(&t.cfg, None));
    c.fingerprints.insert("generator".into(), generator_fingerprint(&t.cfg));
    c.fingerprints.insert("trainer".into(), trainer_fingerprint(&t.cfg));
    c.progress = Some(t.progress);
    c.put_module("generator", &t.generator);
    c.put_adam("opt", t.opt.state());
    c
}

/// Needs `&mut` only to read the spectral-norm buffers.
pub fn finetuner_checkpoint(t: &mut Finetuner) -> Checkpoint {
    let wvn_cfg = t.wvn.as_ref().map(|w| w.config().clone());
    let mut c = Checkpoint::new(Kind::Finetune, training_snapshot(&t.cfg, wvn_cfg.as_ref()));
    c.fingerprints.insert("generator".into(), generator_fingerprint(&t.cfg));
    c.fingerprints
        .insert("discriminators".into(), discriminator_fingerprint(&t.cfg));
    c.fingerprints.insert("trainer".into(), trainer_fingerprint(&t.cfg));
    c.progress = Some(t.progress);
    c.put_module("generator", &t.generator);
    if let Some(g) = &t.gate {
        c.fingerprints.insert("gate".into(), gate_fingerprint());
        c.put_module("gate", g);
    }
    if let (Some(w), Some(wc)) = (&t.wvn, &wvn_cfg) {
        c.fingerprints.insert("wvn".into(), wvn_fingerprint(wc));
        c.put_module("wvn", w);
    }
    c.put_module("discriminators", &t.discriminators);
    c.put_buffers("discriminators", &mut t.discriminators);
    c.put_adam("opt_g", t.opt_g.state());
    c.put_adam("opt_d", t.opt_d.state());
    c
}

pub fn wvn_checkpoint(t: &WvnTrainer) -> Checkpoint {
    let wc = t.model.config().clone();
    let mut c = Checkpoint::new(Kind::Wvn, serde_json::json!({ "wvn": wc, "wvn_train": t.cfg }));
    c.fingerprints.insert("wvn".into(), wvn_fingerprint(&wc));
    c.fingerprints.insert("trainer".into(), fingerprint(&t.cfg));
    c.counters.insert("epoch".into(), t.epoch);
    c.counters.insert("updates".into(), t.updates);
    c.put_module("wvn", &t.model);
    c.put_adam("opt", t.opt.state());
    c
}

impl Checkpoint {
    /// Generator stored in a pretraining or fine-tuning checkpoint, rebuilt
    /// from the recorded configuration. With `expected`, the generator
    /// fingerprint must match it.
    pub fn generator(&self, expected: Option<&TrainingConfig>) -> Result<Generator> {
        self.require_kind(&[Kind::Pretrain, Kind::Finetune])?;
        if let Some(cfg) = expected {
            self.check_fingerprint("generator", &generator_fingerprint(cfg))?;
        }
        let stored: TrainingConfig = self.config_field("training")?;
        let gen_cfg: GeneratorConfig = stored.generator;
        let mut g = Generator::new(gen_cfg, &mut seeded(0))?;
        self.load_params("generator", &mut g)?;
        Ok(g)
    }

    pub fn training_config(&self) -> Result<TrainingConfig> {
        self.config_field("training")
    }

    pub fn gate(&self) -> Result<Option<FusionGateParams>> {
        if !self.has_section("gate") {
            return Ok(None);
        }
        self.check_fingerprint("gate", &gate_fingerprint())?;
        let mut g = init_gate(N_MELS, &mut seeded(0))?;
        self.load_params("gate", &mut g)?;
        Ok(Some(g))
    }

    /// WVN weights from a WVN or fine-tuning checkpoint.
    pub fn wvn_model(&self, expected: Option<&WvnConfig>) -> Result<WvnModel> {
        if !self.has_section("wvn") {
            return Err(Error::Checkpoint("no wvn section".into()));
        }
        let wc: WvnConfig = self.config_field("wvn")?;
        if let Some(e) = expected {
            self.check_fingerprint("wvn", &wvn_fingerprint(e))?;
        }
        let mut m = WvnModel::new(wc, &mut seeded(0))?;
        self.load_params("wvn", &mut m)?;
        Ok(m)
    }

    pub fn pretrainer(&self, cfg: TrainingConfig) -> Result<Pretrainer> {
        self.require_kind(&[Kind::Pretrain])?;
        self.check_fingerprint("trainer", &trainer_fingerprint(&cfg))?;
        let generator = self.generator(Some(&cfg))?;
        let progress = self
            .progress
            .ok_or_else(|| Error::Checkpoint("no progress record".into()))?;
        Ok(Pretrainer::resume(cfg, generator, Some(self.adam("opt")?), progress)?)
    }

    pub fn finetuner(&self, cfg: TrainingConfig) -> Result<Finetuner> {
        self.require_kind(&[Kind::Finetune])?;
        debug_assert_eq!(cfg.phase, Phase::Finetune);
        self.check_fingerprint("trainer", &trainer_fingerprint(&cfg))?;
        self.check_fingerprint("discriminators", &discriminator_fingerprint(&cfg))?;
        let generator = self.generator(Some(&cfg))?;
        let gate = self.gate()?;
        let wvn = if self.has_section("wvn") {
            Some(self.wvn_model(None)?)
        } else {
            None
        };
        let mut discriminators = DiscriminatorSet::new(&cfg.discriminators, &cfg.ablation.families(), &mut seeded(0))?;
        self.load_params("discriminators", &mut discriminators)?;
        self.load_buffers("discriminators", &mut discriminators)?;
        let progress = self
            .progress
            .ok_or_else(|| Error::Checkpoint("no progress record".into()))?;
        let opts = (self.adam("opt_g")?, self.adam("opt_d")?);
        Ok(Finetuner::resume(
            cfg,
            generator,
            gate,
            wvn,
            discriminators,
            Some(opts),
            progress,
        )?)
    }

    pub fn wvn_trainer(&self, cfg: radgan_core::training::WvnTrainConfig, model_cfg: &WvnConfig) -> Result<WvnTrainer> {
        self.require_kind(&[Kind::Wvn])?;
        self.check_fingerprint("trainer", &fingerprint(&cfg))?;
        let model = self.wvn_model(Some(model_cfg))?;
        let mut t = WvnTrainer::new(cfg, model)?;
        t.opt.load_state(self.adam("opt")?);
        t.epoch = self.counter("epoch")?;
        t.updates = self.counter("updates")?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use radgan_core::data::{synthesize_corpus, DegradationSpec};
    use radgan_core::training::{run_until, AblationFlags, WvnTrainConfig};

    fn toy(phase: Phase) -> TrainingConfig {
        TrainingConfig {
            crop_len: 1024,
            ..TrainingConfig::toy(phase)
        }
    }

    #[test]
    fn pretrainer_bytes_are_stable_across_round_trips() {
        let data = synthesize_corpus(2, 1024, &DegradationSpec::default(), 1).unwrap();
        let mut t = Pretrainer::new(toy(Phase::Pretrain)).unwrap();
        run_until(&mut t, &data, 1, &mut |_| {}).unwrap();
        let a = pretrainer_checkpoint(&t).to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&a, Path::new("mem")).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), a);
        let back = loaded.pretrainer(t.cfg.clone()).unwrap();
        assert_eq!(back.generator, t.generator);
        assert_eq!(back.opt.state(), t.opt.state());
        assert_eq!(back.progress, t.progress);
    }

    #[test]
    fn finetuner_state_survives_including_buffers() {
        let cfg = TrainingConfig {
            ablation: AblationFlags::B1,
            ..toy(Phase::Finetune)
        };
        let data = synthesize_corpus(2, 1024, &DegradationSpec::default(), 2).unwrap();
        let mut t = Finetuner::new(cfg.clone(), None, None).unwrap();
        run_until(&mut t, &data, 1, &mut |_| {}).unwrap();
        let ck = finetuner_checkpoint(&mut t);
        let mut back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem"))
            .unwrap()
            .finetuner(cfg)
            .unwrap();
        assert_eq!(back.discriminators, t.discriminators);
        assert_eq!(back.opt_d.state(), t.opt_d.state());
        assert_eq!(
            finetuner_checkpoint(&mut back).to_bytes().unwrap(),
            ck.to_bytes().unwrap()
        );
    }

    #[test]
    fn mel_config_change_is_a_fingerprint_error_naming_both() {
        let t = Pretrainer::new(toy(Phase::Pretrain)).unwrap();
        let ck = pretrainer_checkpoint(&t);
        let mut other = toy(Phase::Pretrain);
        other.conditioning_mel.f_max = 2000.0;
        let e = ck.generator(Some(&other)).unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Fingerprint { .. }));
        assert!(msg.contains(&generator_fingerprint(&t.cfg)) && msg.contains(&generator_fingerprint(&other)));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Pretrainer::new(toy(Phase::Pretrain)).unwrap();
        let bytes = pretrainer_checkpoint(&t).to_bytes().unwrap();
        let p = Path::new("mem");
        assert!(matches!(
            Checkpoint::from_bytes(b"nope", p),
            Err(Error::BadMagic { .. })
        ));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&v, p),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
    }

    #[test]
    fn load_params_reports_missing_and_extra() {
        let t = Pretrainer::new(toy(Phase::Pretrain)).unwrap();
        let mut ck = pretrainer_checkpoint(&t);
        let mut g = t.generator.clone();
        let first = ck.tensors.keys().find(|k| k.starts_with("generator/")).unwrap().clone();
        let removed = ck.tensors.remove(&first).unwrap();
        assert!(ck
            .load_params("generator", &mut g)
            .unwrap_err()
            .to_string()
            .contains("missing"));
        ck.tensors.insert(first, removed);
        ck.tensors.insert("generator/stray".into(), Tensor::zeros(&[1]));
        assert!(ck.load_params("generator", &mut g).is_err());
    }

    #[test]
    fn wvn_trainer_round_trip() {
        let cfg = WvnTrainConfig {
            batch_size: 1,
            accumulation: 1,
            epochs: 1,
            crop_len: 1024,
            ..Default::default()
        };
        let data = synthesize_corpus(1, 1024, &DegradationSpec::default(), 3).unwrap();
        let model = WvnModel::new(WvnConfig::toy(), &mut seeded(0)).unwrap();
        let mut t = WvnTrainer::new(cfg.clone(), model).unwrap();
        t.train_epoch(&data).unwrap();
        let ck = wvn_checkpoint(&t);
        let back = ck.wvn_trainer(cfg, &WvnConfig::toy()).unwrap();
        assert_eq!(back.model, t.model);
        assert_eq!((back.epoch, back.updates), (1, 1));
        assert!(ck.wvn_model(Some(&WvnConfig::paper())).is_err());
    }
}

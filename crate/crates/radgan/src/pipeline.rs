//! Stage drivers shared by the CLI and the tests: training loops with
//! metric logs and periodic checkpoints, inference and batch evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use radgan_core::audio::{MelTransform, ShapeMode, WaveformSegment};
use radgan_core::data::{PairedExample, TaskTag};
use radgan_core::evaluation::{evaluate_pair, MetricReport, PairMetrics, ProviderRegistry};
use radgan_core::fusion_gate::{fuse, FusionGateParams};
use radgan_core::generator::Generator;
use radgan_core::rng::{derive_seed, seeded};
use radgan_core::training::{run_until, Finetuner, Phase, Pretrainer, StepLog, Trainer, TrainingConfig, WvnTrainer};
use radgan_core::wvn::WvnModel;
use radgan_core::SAMPLE_RATE;
use serde::Serialize;

use crate::checkpoint::{finetuner_checkpoint, pretrainer_checkpoint, wvn_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::jsonl::JsonlWriter;
use crate::wav::{read_wav, write_wav};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, Serialize)]
struct StepRecord<'a> {
    phase: &'a str,
    #[serde(flatten)]
    log: &'a StepLog,
}

/// Where a training run ended.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub final_step: u64,
    pub checkpoint: PathBuf,
    pub logs: Vec<StepLog>,
}

fn open_log(out: &Path, interval: u64, resumed: bool) -> Result<JsonlWriter> {
    let p = out.join(METRICS_LOG);
    if resumed {
        JsonlWriter::append(&p, interval)
    } else {
        JsonlWriter::create(&p, interval)
    }
}

fn save_periodic(ck: &Checkpoint, out: &Path, latest: &str, tag: String) -> Result<PathBuf> {
    let dir = out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    ck.save(&dir.join(format!("{tag}.ckpt")))?;
    let p = out.join(latest);
    ck.save(&p)?;
    Ok(p)
}

/// Runs `trainer` to `stop` steps, checkpointing every
/// `checkpoint_interval` steps and at the end.
fn drive<T: Trainer>(
    trainer: &mut T,
    data: &[PairedExample],
    stop: u64,
    run: &RunConfig,
    out: &Path,
    resumed: bool,
    snapshot: &mut dyn FnMut(&mut T) -> Checkpoint,
) -> Result<TrainOutcome> {
    let phase = match trainer.config().phase {
        Phase::Pretrain => "pretrain",
        Phase::Finetune => "finetune",
    };
    let mut log = open_log(out, run.log_interval, resumed)?;
    let mut logs = Vec::new();
    let mut steps_run = 0;
    let mut checkpoint = out.join(format!("{phase}.ckpt"));
    let mut write_err = None;
    loop {
        let target = ((trainer.progress().step / run.checkpoint_interval + 1) * run.checkpoint_interval).min(stop);
        let ran = run_until(trainer, data, target, &mut |s| {
            if let Err(e) = log.write(&StepRecord { phase, log: s }) {
                write_err.get_or_insert(e);
            }
            logs.push(*s);
        })?;
        if let Some(e) = write_err.take() {
            return Err(e);
        }
        steps_run += ran;
        let step = trainer.progress().step;
        if ran > 0 || steps_run == 0 {
            checkpoint = save_periodic(
                &snapshot(trainer),
                out,
                &format!("{phase}.ckpt"),
                format!("{phase}_{step:08}"),
            )?;
        }
        if ran == 0 || step >= stop {
            break;
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        steps_run,
        final_step: trainer.progress().step,
        checkpoint,
        logs,
    })
}

fn with_max_steps(mut cfg: TrainingConfig, max_steps: Option<u64>) -> TrainingConfig {
    if let Some(m) = max_steps {
        cfg.max_steps = m;
    }
    cfg
}

pub fn pretrain(
    run: &RunConfig,
    data: &[PairedExample],
    out: &Path,
    resume: Option<&Path>,
    max_steps: Option<u64>,
) -> Result<TrainOutcome> {
    let cfg = with_max_steps(run.pretrain.clone(), max_steps);
    let mut t = match resume {
        Some(p) => Checkpoint::load(p)?.pretrainer(cfg.clone())?,
        None => Pretrainer::new(cfg.clone())?,
    };
    drive(&mut t, data, cfg.max_steps, run, out, resume.is_some(), &mut |t| {
        pretrainer_checkpoint(t)
    })
}

/// Inputs a fine-tuning run is built from.
#[derive(Clone, Debug, Default)]
pub struct FinetuneInputs<'a> {
    pub pretrained: Option<&'a Path>,
    pub wvn: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

/// Checks the flag contract before any work: WVN conditioning needs a WVN
/// checkpoint and pretrained initialization needs a generator checkpoint.
pub fn check_finetune_inputs(cfg: &TrainingConfig, inputs: &FinetuneInputs) -> Result<()> {
    if inputs.resume.is_some() {
        return Ok(());
    }
    if cfg.ablation.use_wvn_conditioning && inputs.wvn.is_none() {
        return Err(Error::MissingFlag {
            flag: "--wvn-checkpoint",
            message: "WVN conditioning is enabled but no WVN checkpoint was given; use --no-wvn to disable it".into(),
        });
    }
    if cfg.ablation.use_pretrained_init && inputs.pretrained.is_none() {
        return Err(Error::MissingFlag {
            flag: "--pretrained",
            message: "pretrained initialization is enabled but no generator checkpoint was given".into(),
        });
    }
    Ok(())
}

pub fn finetune(
    run: &RunConfig,
    data: &[PairedExample],
    out: &Path,
    inputs: &FinetuneInputs,
    max_steps: Option<u64>,
) -> Result<TrainOutcome> {
    let cfg = with_max_steps(run.finetune.clone(), max_steps);
    check_finetune_inputs(&cfg, inputs)?;
    let mut t = match inputs.resume {
        Some(p) => Checkpoint::load(p)?.finetuner(cfg.clone())?,
        None => {
            let pretrained = match (cfg.ablation.use_pretrained_init, inputs.pretrained) {
                (true, Some(p)) => Some(Checkpoint::load(p)?.generator(Some(&cfg))?),
                _ => None,
            };
            let wvn = match (cfg.ablation.use_wvn_conditioning, inputs.wvn) {
                (true, Some(p)) => Some(Checkpoint::load(p)?.wvn_model(Some(&run.wvn))?),
                _ => None,
            };
            Finetuner::new(cfg.clone(), pretrained, wvn)?
        }
    };
    drive(
        &mut t,
        data,
        cfg.max_steps,
        run,
        out,
        inputs.resume.is_some(),
        &mut |t| finetuner_checkpoint(t),
    )
}

#[derive(Clone, Debug, Serialize)]
struct WvnRecord {
    phase: &'static str,
    epoch: u64,
    updates: u64,
    loss: f64,
}

/// Trains the WVN for the configured epochs; returns per-epoch losses and
/// the checkpoint path.
pub fn train_wvn(
    run: &RunConfig,
    data: &[PairedExample],
    out: &Path,
    resume: Option<&Path>,
    epochs: Option<u64>,
) -> Result<(Vec<f64>, PathBuf)> {
    if data.is_empty() {
        return Err(radgan_core::Error::EmptyDataset.into());
    }
    let mut cfg = run.wvn_train.clone();
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let mut t = match resume {
        Some(p) => Checkpoint::load(p)?.wvn_trainer(cfg.clone(), &run.wvn)?,
        None => WvnTrainer::new(
            cfg.clone(),
            WvnModel::new(run.wvn.clone(), &mut seeded(derive_seed(run.seed, "wvn", 0)))?,
        )?,
    };
    let mut log = open_log(out, run.log_interval, resume.is_some())?;
    let mut losses = Vec::new();
    let mut latest = out.join("wvn.ckpt");
    while t.epoch < cfg.epochs {
        let loss = t.train_epoch(data)?;
        losses.push(loss);
        log.write(&WvnRecord {
            phase: "wvn",
            epoch: t.epoch,
            updates: t.updates,
            loss,
        })?;
        if t.epoch % run.checkpoint_interval == 0 || t.epoch == cfg.epochs {
            latest = save_periodic(
                &wvn_checkpoint(&t),
                out,
                "wvn.ckpt",
                format!("wvn_epoch_{:05}", t.epoch),
            )?;
        }
    }
    if losses.is_empty() {
        latest = save_periodic(
            &wvn_checkpoint(&t),
            out,
            "wvn.ckpt",
            format!("wvn_epoch_{:05}", t.epoch),
        )?;
    }
    log.flush()?;
    Ok((losses, latest))
}

/// Generator plus optional fusion for inference.
pub struct Enhancer {
    pub generator: Generator,
    pub gate: Option<FusionGateParams>,
    pub wvn: Option<WvnModel>,
    cond: MelTransform,
}

impl Enhancer {
    /// Loads a pretraining or fine-tuning checkpoint. Fused conditioning is
    /// used when the checkpoint has a gate and `no_wvn` is off; the WVN then
    /// comes from `wvn_checkpoint`, or from the checkpoint itself.
    pub fn load(checkpoint: &Path, wvn_checkpoint: Option<&Path>, no_wvn: bool) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint)?;
        let cfg = ck.training_config()?;
        let generator = ck.generator(None)?;
        let gate = if no_wvn { None } else { ck.gate()? };
        let wvn = match (&gate, wvn_checkpoint) {
            (None, _) => None,
            (Some(_), Some(p)) => Some(Checkpoint::load(p)?.wvn_model(None)?),
            (Some(_), None) if ck.has_section("wvn") => Some(ck.wvn_model(None)?),
            (Some(_), None) => {
                return Err(Error::MissingFlag {
                    flag: "--wvn-checkpoint",
                    message: "checkpoint uses WVN conditioning but carries no WVN weights; use --no-wvn to skip fusion"
                        .into(),
                })
            }
        };
        Ok(Self {
            generator,
            gate,
            wvn,
            cond: MelTransform::new(SAMPLE_RATE, cfg.stft, cfg.conditioning_mel)?,
        })
    }

    pub fn hop(&self) -> usize {
        self.generator.config().hop()
    }

    /// Conditioning mel: `M_n`, or the fusion of `M_n` and the WVN output's mel.
    pub fn conditioning(&self, noisy: &WaveformSegment) -> Result<radgan_core::audio::MelSpectrogram> {
        noisy.require_rate(SAMPLE_RATE)?;
        let m_n = self.cond.compute(noisy)?;
        Ok(match (&self.gate, &self.wvn) {
            (Some(g), Some(w)) => fuse(&m_n, &self.cond.compute(&w.enhance(noisy)?)?, g)?,
            _ => m_n,
        })
    }

    /// `hop * frames` samples.
    pub fn enhance(&self, noisy: &WaveformSegment) -> Result<WaveformSegment> {
        Ok(self.generator.synthesize(&self.conditioning(noisy)?)?)
    }
}

/// WAV files named by `inputs`; directories contribute their `*.wav` files.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(Error::io(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Per-file result of a batch inference.
#[derive(Clone, Debug, Serialize)]
pub struct InferRecord {
    pub input: PathBuf,
    pub output: Option<PathBuf>,
    pub samples: Option<usize>,
    pub error: Option<String>,
}

/// Enhances every input into `out_dir/<stem>.wav`. A failing file is
/// recorded and the batch continues.
pub fn infer_files(enhancer: &Enhancer, inputs: &[PathBuf], out_dir: &Path) -> Vec<InferRecord> {
    inputs
        .iter()
        .map(|input| {
            let result = (|| -> Result<(PathBuf, usize)> {
                let w = read_wav(input)?;
                let y = enhancer.enhance(&w)?;
                let name = input
                    .file_name()
                    .ok_or_else(|| Error::Other("input has no file name".into()))?;
                let out = out_dir.join(name);
                write_wav(&out, &y)?;
                Ok((out, y.len()))
            })();
            match result {
                Ok((p, n)) => InferRecord {
                    input: input.clone(),
                    output: Some(p),
                    samples: Some(n),
                    error: None,
                },
                Err(e) => InferRecord {
                    input: input.clone(),
                    output: None,
                    samples: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
struct PairRecord<'a> {
    record: &'static str,
    #[serde(flatten)]
    raw: &'a PairMetrics,
    normalized: radgan_core::evaluation::NormalizedMetrics,
}

#[derive(Clone, Debug, Serialize)]
struct AggregateRecord<'a> {
    record: &'static str,
    pairs: usize,
    skipped: &'a [String],
    per_task: &'a BTreeMap<TaskTag, radgan_core::evaluation::TaskSummary>,
    weighted_score: Option<f64>,
}

/// Evaluation of a directory pair.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// One line per skipped pair.
    pub skipped: Vec<String>,
}

fn evaluate_one(
    id: &str,
    task: TaskTag,
    clean_dir: &Path,
    enhanced_dir: &Path,
    registry: &ProviderRegistry,
) -> std::result::Result<PairMetrics, String> {
    let clean_path = clean_dir.join(format!("{id}.wav"));
    let enh_path = enhanced_dir.join(format!("{id}.wav"));
    if !enh_path.exists() {
        return Err(format!("{id}: enhanced file {} is missing", enh_path.display()));
    }
    let clean = read_wav(&clean_path).map_err(|e| format!("{id}: {e}"))?;
    let enhanced = read_wav(&enh_path).map_err(|e| format!("{id}: {e}"))?;
    let mut note = None;
    let enhanced = if enhanced.len() != clean.len() && enhanced.sample_rate() == clean.sample_rate() {
        note = Some(format!(
            "enhanced length {} trimmed or padded to {}",
            enhanced.len(),
            clean.len()
        ));
        radgan_core::audio::shape_segment(&enhanced, clean.len(), ShapeMode::ClipOrPad, 0)
            .map_err(|e| format!("{id}: {e}"))?
    } else {
        enhanced
    };
    let mut m = evaluate_pair(id, task, &clean, &enhanced, registry).map_err(|e| format!("{id}: {e}"))?;
    m.diagnostics.extend(note);
    Ok(m)
}

/// Scores every `<clean_dir>/<id>.wav` against `<enhanced_dir>/<id>.wav`.
/// Pairs that cannot be scored are skipped with a diagnostic.
pub fn evaluate_dirs(
    clean_dir: &Path,
    enhanced_dir: &Path,
    tasks: &(dyn Fn(&str) -> TaskTag + Sync),
    registry: &ProviderRegistry,
    workers: usize,
) -> Result<Evaluation> {
    let ids: Vec<String> = expand_inputs(&[clean_dir.to_path_buf()])?
        .iter()
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    let workers = workers.clamp(1, ids.len().max(1));
    let chunk = ids.len().div_ceil(workers).max(1);
    let results: Vec<std::result::Result<PairMetrics, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|id| evaluate_one(id, tasks(id), clean_dir, enhanced_dir, registry))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker"))
            .collect()
    });
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(m) => pairs.push(m),
            Err(e) => skipped.push(e),
        }
    }
    Ok(Evaluation {
        report: MetricReport::from_pairs(pairs),
        skipped,
    })
}

/// One record per pair, then the aggregate.
pub fn write_report(path: &Path, e: &Evaluation) -> Result<()> {
    let mut w = JsonlWriter::create(path, u64::MAX)?;
    for p in &e.report.pairs {
        w.write(&PairRecord {
            record: "pair",
            raw: p,
            normalized: p.normalized(),
        })?;
    }
    w.write(&AggregateRecord {
        record: "aggregate",
        pairs: e.report.pairs.len(),
        skipped: &e.skipped,
        per_task: &e.report.per_task,
        weighted_score: e.report.weighted_score,
    })?;
    w.flush()
}

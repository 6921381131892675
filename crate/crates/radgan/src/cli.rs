//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use radgan_core::audio::WaveformSegment;
use radgan_core::training::AblationFlags;

use crate::config::{Profile, RunConfig};
use crate::corpus::{synthesize_to_dir, Corpus, CorpusManifest, CLEAN_DIR, MANIFEST, NOISY_DIR};
use crate::error::{Error, Result};
use crate::jsonl::JsonlWriter;
use crate::manifest::{prepare_output_dir, RunManifest};
use crate::pipeline::{self, Enhancer, FinetuneInputs};
use crate::plot::{self, Panel, PlotLayout};
use crate::providers::registry_from_config;
use crate::wav::read_wav;

#[derive(Debug, Parser)]
#[command(
    name = "radgan",
    version,
    about = "Band-limited, noisy speech reconstruction with a dual-conditioned GAN vocoder"
)]
pub struct Cli {
    /// TOML run configuration; missing keys take profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Default set: `paper` or `toy`.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Root seed; every stage seed derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single worker everywhere; outputs depend only on the manifest.
    #[arg(long, global = true)]
    pub determinism: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired corpus and its manifest.
    SynthData {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        clip_len: Option<usize>,
    },
    /// Phase 1: generator pretraining on band-limited clean speech.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the magnitude-domain enhancer.
    TrainWvn {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Phase 2: adversarial fine-tuning on noisy input.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Pretraining checkpoint for the generator initialization.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        wvn_checkpoint: Option<PathBuf>,
        /// Condition on the noisy mel only.
        #[arg(long)]
        no_wvn: bool,
        /// Ablation preset B0, B1, B2 or B3.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance WAV files or directories of them.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wvn_checkpoint: Option<PathBuf>,
        #[arg(long)]
        no_wvn: bool,
        #[command(flatten)]
        out: OutArgs,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score enhanced files against clean references.
    Evaluate {
        /// Directory of clean references, `<id>.wav`.
        #[arg(long)]
        clean: PathBuf,
        /// Directory of enhanced files with the same names.
        #[arg(long)]
        enhanced: PathBuf,
        /// Corpus root whose manifest supplies task tags.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, default_value = "report.jsonl")]
        report: String,
    },
    /// Waveform and spectrogram grid of up to four signals.
    Plot {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        wvn: Option<PathBuf>,
        #[arg(long)]
        radgan: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, default_value = "comparison.png")]
        name: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainWvn { .. } => "train-wvn",
            Command::Finetune { .. } => "finetune",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::Plot { .. } => "plot",
        }
    }

    fn out(&self) -> &OutArgs {
        match self {
            Command::SynthData { out, .. }
            | Command::Pretrain { out, .. }
            | Command::TrainWvn { out, .. }
            | Command::Finetune { out, .. }
            | Command::Infer { out, .. }
            | Command::Evaluate { out, .. }
            | Command::Plot { out, .. } => out,
        }
    }

    fn resumes(&self) -> bool {
        matches!(
            self,
            Command::Pretrain { resume: Some(_), .. }
                | Command::TrainWvn { resume: Some(_), .. }
                | Command::Finetune { resume: Some(_), .. }
        )
    }
}

/// Resolved configuration after file, environment and flags.
pub fn resolve_config(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let profile = cli.profile.as_deref().map(Profile::parse).transpose()?;
    let mut cfg = RunConfig::load(profile, cli.config.as_deref(), env)?;
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if cli.determinism {
        cfg.determinism = true;
    }
    if cfg.determinism {
        cfg.evaluation.workers = 1;
    }
    match &cli.command {
        Command::SynthData { clips, clip_len, .. } => {
            cfg.data.clips = clips.unwrap_or(cfg.data.clips);
            cfg.data.clip_len = clip_len.unwrap_or(cfg.data.clip_len);
        }
        Command::Finetune { ablation, no_wvn, .. } => {
            if let Some(a) = ablation {
                cfg.finetune.ablation = AblationFlags::preset(a)?;
            }
            if *no_wvn {
                cfg.finetune.ablation.use_wvn_conditioning = false;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command. The run manifest is written before any work.
pub fn run(cli: &Cli, argv: Vec<String>, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let cfg = resolve_config(cli, env)?;
    if let Command::Finetune {
        pretrained,
        wvn_checkpoint,
        resume,
        ..
    } = &cli.command
    {
        pipeline::check_finetune_inputs(
            &cfg.finetune,
            &FinetuneInputs {
                pretrained: pretrained.as_deref(),
                wvn: wvn_checkpoint.as_deref(),
                resume: resume.as_deref(),
            },
        )?;
    }
    let out = &cli.command.out().out;
    prepare_output_dir(out, cli.command.out().force || cli.command.resumes())?;
    let mut manifest = RunManifest::start(cli.command.name(), argv, cli.config.as_deref(), &cfg, out);
    manifest.write()?;
    let result = execute(&cli.command, &cfg, out);
    manifest.finish(result.as_ref().map(|_| ()).map_err(|e| e.to_string()))?;
    result
}

fn corpus(data: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let c = Corpus::open(data, &cfg.data, cfg.seed)?;
    eprintln!("corpus {}: split {}", data.display(), c.manifest.sizes);
    Ok(c)
}

fn execute(command: &Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    match command {
        Command::SynthData { .. } => {
            for stale in [CLEAN_DIR, NOISY_DIR] {
                let p = out.join(stale);
                if p.exists() {
                    std::fs::remove_dir_all(&p).map_err(Error::io(&p))?;
                }
            }
            let m = synthesize_to_dir(out, &cfg.data, cfg.seed)?;
            eprintln!(
                "wrote {} pairs, split {}, manifest {}",
                m.entries.len(),
                m.sizes,
                out.join(MANIFEST).display()
            );
            Ok(())
        }
        Command::Pretrain {
            data,
            max_steps,
            resume,
            ..
        } => {
            let c = corpus(data, cfg)?;
            let r = pipeline::pretrain(cfg, &c.train, out, resume.as_deref(), *max_steps)?;
            report_training("pretrain", &r);
            Ok(())
        }
        Command::TrainWvn {
            data, epochs, resume, ..
        } => {
            let c = corpus(data, cfg)?;
            let (losses, ck) = pipeline::train_wvn(cfg, &c.train, out, resume.as_deref(), *epochs)?;
            eprintln!(
                "train-wvn: {} epochs, last loss {:?}, checkpoint {}",
                losses.len(),
                losses.last(),
                ck.display()
            );
            Ok(())
        }
        Command::Finetune {
            data,
            max_steps,
            pretrained,
            wvn_checkpoint,
            resume,
            ..
        } => {
            let c = corpus(data, cfg)?;
            let inputs = FinetuneInputs {
                pretrained: pretrained.as_deref(),
                wvn: wvn_checkpoint.as_deref(),
                resume: resume.as_deref(),
            };
            let r = pipeline::finetune(cfg, &c.train, out, &inputs, *max_steps)?;
            report_training("finetune", &r);
            Ok(())
        }
        Command::Infer {
            checkpoint,
            wvn_checkpoint,
            no_wvn,
            inputs,
            ..
        } => {
            let enhancer = Enhancer::load(checkpoint, wvn_checkpoint.as_deref(), *no_wvn)?;
            let files = pipeline::expand_inputs(inputs)?;
            let records = pipeline::infer_files(&enhancer, &files, out);
            let mut log = JsonlWriter::create(&out.join("infer.jsonl"), u64::MAX)?;
            for r in &records {
                log.write(r)?;
                if let Some(e) = &r.error {
                    eprintln!("error: {}: {e}", r.input.display());
                }
            }
            log.flush()?;
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            eprintln!("infer: {} of {} files enhanced", records.len() - failed, records.len());
            if failed > 0 {
                return Err(Error::Other(format!("{failed} of {} inputs failed", records.len())));
            }
            Ok(())
        }
        Command::Evaluate {
            clean,
            enhanced,
            corpus,
            report,
            ..
        } => {
            let manifest: Option<CorpusManifest> = corpus.as_deref().map(CorpusManifest::read).transpose()?.flatten();
            let default_task = cfg.data.task;
            let tasks = |id: &str| manifest.as_ref().and_then(|m| m.task_of(id)).unwrap_or(default_task);
            let registry = registry_from_config(&cfg.evaluation);
            let workers = match cfg.evaluation.workers {
                0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
                n => n,
            };
            let e = pipeline::evaluate_dirs(clean, enhanced, &tasks, &registry, workers)?;
            let path = out.join(report);
            pipeline::write_report(&path, &e)?;
            for s in &e.skipped {
                eprintln!("skipped: {s}");
            }
            eprintln!(
                "evaluate: {} pairs scored, weighted score {:?}, report {}",
                e.report.pairs.len(),
                e.report.weighted_score,
                path.display()
            );
            if !e.skipped.is_empty() {
                return Err(Error::Other(format!("{} pairs skipped", e.skipped.len())));
            }
            Ok(())
        }
        Command::Plot {
            clean,
            noisy,
            wvn,
            radgan,
            name,
            ..
        } => {
            let mut panels = Vec::new();
            for (label, path) in [
                ("clean", Some(clean)),
                ("noisy", Some(noisy)),
                ("wvn", wvn.as_ref()),
                ("rad-gan", radgan.as_ref()),
            ] {
                if let Some(p) = path {
                    let wave: WaveformSegment = read_wav(p)?;
                    panels.push(Panel {
                        label: label.into(),
                        wave,
                    });
                }
            }
            let path = out.join(name);
            plot::save(&path, &panels, &PlotLayout::default())?;
            let labels: Vec<&str> = panels.iter().map(|p| p.label.as_str()).collect();
            eprintln!(
                "plot: {} columns ({}) -> {}",
                panels.len(),
                labels.join(", "),
                path.display()
            );
            Ok(())
        }
    }
}

fn report_training(phase: &str, r: &pipeline::TrainOutcome) {
    match r.logs.last() {
        Some(l) => eprintln!(
            "{phase}: {} steps (now at {}), last total loss {:.4}, checkpoint {}",
            r.steps_run,
            r.final_step,
            l.total,
            r.checkpoint.display()
        ),
        None => eprintln!(
            "{phase}: nothing to do at step {}, checkpoint {}",
            r.final_step,
            r.checkpoint.display()
        ),
    }
}

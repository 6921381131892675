//! Two-stage training: Phase-1 generator pretraining on band-limited clean
//! speech, WVN training, and Phase-2 adversarial fine-tuning on fused
//! conditioning.
//!
//! Every trainer keeps its full state in public fields so the std crate can
//! checkpoint and restore it. Batch order and crop offsets are functions of
//! `(seed, epoch)`, so [`Progress`] is all the data-side state there is.

use alloc::format;
use alloc::vec::Vec;

use crate::audio::{bandlimit, MelConfig, MelTransform, SpectrogramConfig, WaveformSegment};
use crate::autodiff::Var;
use crate::data::{batch_iterator, Batch, PairedExample};
use crate::discriminators::{DiscriminatorConfig, DiscriminatorSet};
use crate::fusion_gate::{init_gate, FusionGateParams};
use crate::generator::{Generator, GeneratorConfig};
use crate::instrumentation::DiscriminatorFamily;
use crate::losses::{discriminator_total, generator_total, LossContext, LossWeights, MrStftConfig};
use crate::nn::{accumulate, grad_norm, scale_grads, Binder, GradMap, Module};
use crate::optim::{Adam, AdamConfig, ExponentialLr};
use crate::rng::{derive_seed, seeded};
use crate::wvn::WvnModel;
use crate::{Error, Result, Tensor, N_MELS, SAMPLE_RATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationFlags {
    pub use_mmd: bool,
    pub use_mrstft: bool,
    pub use_pretrained_init: bool,
    pub use_wvn_conditioning: bool,
}

impl AblationFlags {
    /// Plain vocoder recipe: MPD + MSD, mel L1, from scratch, noisy mel only.
    pub const B0: Self = Self {
        use_mmd: false,
        use_mrstft: false,
        use_pretrained_init: false,
        use_wvn_conditioning: false,
    };
    pub const B1: Self = Self {
        use_mmd: true,
        use_mrstft: true,
        ..Self::B0
    };
    pub const B2: Self = Self {
        use_pretrained_init: true,
        ..Self::B1
    };
    pub const B3: Self = Self {
        use_wvn_conditioning: true,
        ..Self::B2
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "B0" | "b0" => Ok(Self::B0),
            "B1" | "b1" => Ok(Self::B1),
            "B2" | "b2" => Ok(Self::B2),
            "B3" | "b3" => Ok(Self::B3),
            other => Err(Error::InvalidConfig(format!("unknown ablation preset {other:?}"))),
        }
    }

    pub fn families(&self) -> Vec<DiscriminatorFamily> {
        let mut f = alloc::vec![DiscriminatorFamily::Mpd, DiscriminatorFamily::Msd];
        if self.use_mmd {
            f.push(DiscriminatorFamily::Mmd);
        }
        f
    }

    /// Names of the generator objective's terms under these flags.
    pub fn objective_terms(&self) -> Vec<&'static str> {
        let mut t = Vec::new();
        for f in self.families() {
            t.push(match f {
                DiscriminatorFamily::Mpd => "adv:MPD",
                DiscriminatorFamily::Msd => "adv:MSD",
                DiscriminatorFamily::Mmd => "adv:MMD",
            });
            t.push(match f {
                DiscriminatorFamily::Mpd => "fm:MPD",
                DiscriminatorFamily::Msd => "fm:MSD",
                DiscriminatorFamily::Mmd => "fm:MMD",
            });
        }
        t.push("mel");
        if self.use_mrstft {
            t.push("mrstft");
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingConfig {
    pub phase: Phase,
    pub seed: u64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Per-epoch multiplicative decay.
    pub lr_decay_gamma: f64,
    pub batch_size: usize,
    pub crop_len: usize,
    pub max_steps: u64,
    pub max_epochs: Option<u64>,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    pub ablation: AblationFlags,
    /// Framing shared by the conditioning mel and the loss mel.
    pub stft: SpectrogramConfig,
    pub conditioning_mel: MelConfig,
    pub loss: LossWeights,
    pub mrstft: MrStftConfig,
    pub generator: GeneratorConfig,
    pub discriminators: DiscriminatorConfig,
}

impl TrainingConfig {
    pub fn paper(phase: Phase) -> Self {
        Self {
            phase,
            seed: 0,
            lr: 1e-4,
            betas: (0.9, 0.99),
            weight_decay: 0.01,
            lr_decay_gamma: 0.999,
            batch_size: 16,
            crop_len: crate::data::CLIP_LEN,
            max_steps: match phase {
                Phase::Pretrain => 66_000,
                Phase::Finetune => 100_000,
            },
            max_epochs: None,
            grad_clip: None,
            ablation: AblationFlags::B3,
            stft: SpectrogramConfig::paper(),
            conditioning_mel: MelConfig::conditioning(),
            loss: LossWeights::default(),
            mrstft: MrStftConfig::default(),
            generator: GeneratorConfig::paper(),
            discriminators: DiscriminatorConfig::paper(),
        }
    }

    /// Desk-scale variant: 32-sample hop, narrow networks, short crops.
    /// Pretraining runs at a 10x step size so the narrow generator fits
    /// within a few thousand steps.
    pub fn toy(phase: Phase) -> Self {
        Self {
            lr: match phase {
                Phase::Pretrain => 1e-3,
                Phase::Finetune => 1e-4,
            },
            batch_size: 2,
            crop_len: 2048,
            max_steps: 200,
            stft: SpectrogramConfig::new(512, 32, 256).expect("valid toy framing"),
            generator: GeneratorConfig::toy(),
            discriminators: DiscriminatorConfig::toy(),
            ..Self::paper(phase)
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            betas: self.betas,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<ExponentialLr> {
        ExponentialLr::new(self.lr, self.lr_decay_gamma)
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.schedule()?;
        if self.batch_size == 0 || self.crop_len == 0 {
            return Err(Error::InvalidConfig("batch_size and crop_len must be >= 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        if self.stft.hop != self.generator.hop() {
            return Err(Error::InvalidConfig(format!(
                "STFT hop {} differs from generator hop {}",
                self.stft.hop,
                self.generator.hop()
            )));
        }
        if self.conditioning_mel.n_mels != N_MELS || self.generator.n_mels != N_MELS {
            return Err(Error::ConditioningBins(self.conditioning_mel.n_mels));
        }
        self.conditioning_mel.validate(SAMPLE_RATE)?;
        self.generator.validate()
    }

    fn loss_context(&self) -> Result<LossContext> {
        LossContext::new(self.loss, self.mrstft.clone(), self.stft)
    }

    fn conditioning(&self) -> Result<MelTransform> {
        MelTransform::new(SAMPLE_RATE, self.stft, self.conditioning_mel)
    }
}

/// Position in the data stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Progress {
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: u64,
}

/// Scalars recorded after every step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub mel: f64,
    pub mrstft: Option<f64>,
    pub adv: Option<f64>,
    pub fm: Option<f64>,
    pub disc: Option<f64>,
}

/// What [`run_until`] drives.
pub trait Trainer {
    fn config(&self) -> &TrainingConfig;
    fn progress(&self) -> Progress;
    fn progress_mut(&mut self) -> &mut Progress;
    fn set_lr(&mut self, lr: f64);
    /// One optimizer step on one batch; does not touch [`Progress`].
    fn train_batch(&mut self, batch: &Batch) -> Result<StepLog>;
}

/// Trains until `stop_step` completed steps, `max_steps` or `max_epochs`,
/// whichever comes first. The learning rate is set from the schedule at the
/// start of each epoch and never inside one. Returns the number of steps run.
pub fn run_until<T: Trainer + ?Sized>(
    trainer: &mut T,
    data: &[PairedExample],
    stop_step: u64,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<u64> {
    let cfg = trainer.config().clone();
    let sched = cfg.schedule()?;
    let stop = stop_step.min(cfg.max_steps);
    let mut ran = 0;
    while trainer.progress().step < stop && cfg.max_epochs.is_none_or(|m| trainer.progress().epoch < m) {
        let Progress {
            epoch, batch_in_epoch, ..
        } = trainer.progress();
        let lr = sched.lr_at(epoch);
        trainer.set_lr(lr);
        let batches = batch_iterator(data, cfg.batch_size, cfg.crop_len, cfg.seed, epoch)?;
        for batch in batches.skip(batch_in_epoch as usize) {
            if trainer.progress().step >= stop {
                return Ok(ran);
            }
            let mut log = trainer.train_batch(&batch)?;
            let p = trainer.progress_mut();
            p.step += 1;
            p.batch_in_epoch += 1;
            log.step = p.step;
            log.epoch = epoch;
            log.lr = lr;
            ran += 1;
            on_step(&log);
        }
        let p = trainer.progress_mut();
        p.epoch += 1;
        p.batch_in_epoch = 0;
    }
    Ok(ran)
}

fn clip(grads: &mut GradMap, max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let n = grad_norm(grads);
        if n > c {
            scale_grads(grads, c / n);
        }
    }
}

/// Conditioning log-mel `[B, n_mels, T]` of a `[B, L]` batch, no graph.
fn conditioning_mel(cond: &MelTransform, wave: &Tensor) -> Var {
    Var::constant(cond.forward(&Var::constant(wave.clone())).value().clone())
}

/// Zero-phase low-pass of every row of a `[B, L]` batch.
pub fn bandlimit_rows(x: &Tensor, cutoff_hz: f64) -> Result<Tensor> {
    let len = x.dim(1);
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.dim(0) {
        let w = WaveformSegment::at_8k(x.row(r).to_vec())?;
        out.extend_from_slice(bandlimit(&w, cutoff_hz)?.samples());
    }
    Tensor::new(&[x.dim(0), len], out)
}

/// Phase 1: band-limited conditioning, generator only, mel L1 + MR-STFT.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub cfg: TrainingConfig,
    pub generator: Generator,
    pub opt: Adam,
    pub progress: Progress,
    ctx: LossContext,
    cond: MelTransform,
}

impl Pretrainer {
    pub fn new(cfg: TrainingConfig) -> Result<Self> {
        let generator = Generator::new(
            cfg.generator.clone(),
            &mut seeded(derive_seed(cfg.seed, "generator", 0)),
        )?;
        Self::resume(cfg, generator, None, Progress::default())
    }

    pub fn resume(
        cfg: TrainingConfig,
        generator: Generator,
        opt_state: Option<crate::optim::AdamState>,
        progress: Progress,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.phase != Phase::Pretrain {
            return Err(Error::InvalidConfig("pretrainer needs phase = pretrain".into()));
        }
        let mut opt = Adam::new(cfg.adam())?;
        if let Some(s) = opt_state {
            opt.load_state(s);
        }
        Ok(Self {
            ctx: cfg.loss_context()?,
            cond: cfg.conditioning()?,
            cfg,
            generator,
            opt,
            progress,
        })
    }

    /// Band edges of the conditioning mel, in Hz.
    pub fn conditioning_band(&self) -> (f64, f64) {
        (self.cfg.conditioning_mel.f_min, self.cfg.conditioning_mel.f_max)
    }

    /// Pretraining loss on `clean` `[B, L]` without updating anything.
    pub fn evaluate_batch(&self, clean: &Tensor) -> Result<f64> {
        let mut b = Binder::frozen();
        Ok(self.loss_graph(&mut b, clean)?.0.value().item())
    }

    fn loss_graph(&self, b: &mut Binder, clean: &Tensor) -> Result<(Var, Var, Var)> {
        let limited = bandlimit_rows(clean, self.cfg.conditioning_mel.f_max)?;
        let mel = conditioning_mel(&self.cond, &limited);
        let len = clean.dim(1);
        let xhat = self.generator.forward(b, &mel)?.narrow_last(0, len);
        let x = Var::constant(clean.clone());
        let mel_term = self.ctx.mel_l1(&x, &xhat)?;
        let stft_term = self.ctx.mrstft(&x, &xhat)?;
        Ok((mel_term.add(&stft_term), mel_term, stft_term))
    }
}

impl Trainer for Pretrainer {
    fn config(&self) -> &TrainingConfig {
        &self.cfg
    }
    fn progress(&self) -> Progress {
        self.progress
    }
    fn progress_mut(&mut self) -> &mut Progress {
        &mut self.progress
    }
    fn set_lr(&mut self, lr: f64) {
        self.opt.set_lr(lr);
    }

    fn train_batch(&mut self, batch: &Batch) -> Result<StepLog> {
        let mut b = Binder::trainable();
        let (total, mel, stft) = self.loss_graph(&mut b, &batch.clean)?;
        let mut grads = b.grads(&total.backward());
        clip(&mut grads, self.cfg.grad_clip);
        self.opt.step(&mut self.generator, &grads);
        Ok(StepLog {
            total: total.value().item(),
            mel: mel.value().item(),
            mrstft: Some(stft.value().item()),
            ..Default::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WvnTrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub epochs: u64,
    pub crop_len: usize,
}

impl Default for WvnTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-3,
            batch_size: 8,
            accumulation: 8,
            epochs: 30,
            crop_len: crate::data::CLIP_LEN,
        }
    }
}

impl WvnTrainConfig {
    /// Examples behind one optimizer update.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation
    }

    pub fn validate(&self) -> Result<()> {
        AdamConfig::adam(self.lr).validate()?;
        if self.batch_size == 0 || self.accumulation == 0 || self.crop_len == 0 {
            return Err(Error::InvalidConfig(
                "WVN batch, accumulation and crop must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Magnitude-MSE training of the WVN with gradient accumulation.
#[derive(Clone, Debug)]
pub struct WvnTrainer {
    pub cfg: WvnTrainConfig,
    pub model: WvnModel,
    pub opt: Adam,
    /// Completed epochs.
    pub epoch: u64,
    pub updates: u64,
}

impl WvnTrainer {
    pub fn new(cfg: WvnTrainConfig, model: WvnModel) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt: Adam::new(AdamConfig::adam(cfg.lr))?,
            cfg,
            model,
            epoch: 0,
            updates: 0,
        })
    }

    /// One pass over `data`; returns the mean micro-batch loss. Micro-batches
    /// left over at the end of the epoch still produce an update.
    pub fn train_epoch(&mut self, data: &[PairedExample]) -> Result<f64> {
        let batches = batch_iterator(data, self.cfg.batch_size, self.cfg.crop_len, self.cfg.seed, self.epoch)?;
        let (mut acc, mut pending, mut sum, mut count) = (GradMap::new(), 0usize, 0.0, 0usize);
        for batch in batches {
            let mut b = Binder::trainable();
            let loss = self.model.loss(&mut b, &batch.noisy, &batch.clean)?;
            accumulate(&mut acc, b.grads(&loss.backward()));
            sum += loss.value().item();
            count += 1;
            pending += 1;
            if pending == self.cfg.accumulation {
                self.apply(&mut acc, pending);
                pending = 0;
            }
        }
        if pending > 0 {
            self.apply(&mut acc, pending);
        }
        self.epoch += 1;
        Ok(sum / count as f64)
    }

    fn apply(&mut self, acc: &mut GradMap, n: usize) {
        scale_grads(acc, 1.0 / n as f64);
        self.opt.step(&mut self.model, acc);
        acc.clear();
        self.updates += 1;
    }
}

/// Runs every remaining epoch; returns per-epoch mean losses.
pub fn train_wvn(trainer: &mut WvnTrainer, data: &[PairedExample]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut losses = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        losses.push(trainer.train_epoch(data)?);
    }
    Ok(losses)
}

/// Phase 2: WVN and noisy mels fused by the gate, adversarial training
/// against the families the flags select.
#[derive(Clone, Debug)]
pub struct Finetuner {
    pub cfg: TrainingConfig,
    pub generator: Generator,
    pub gate: Option<FusionGateParams>,
    pub wvn: Option<WvnModel>,
    pub discriminators: DiscriminatorSet,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub progress: Progress,
    ctx: LossContext,
    cond: MelTransform,
}

/// Trainable generator-side parameters: the generator and, when present,
/// the fusion gate.
struct GenSide<'a>(&'a mut Generator, &'a mut Option<FusionGateParams>);

impl Module for GenSide<'_> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a crate::nn::Param)) {
        self.0.visit_params(f);
        self.1.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        self.0.visit_params_mut(f);
        self.1.visit_params_mut(f);
    }
}

impl Finetuner {
    /// Fresh fine-tuning run. `pretrained` is required exactly when
    /// `use_pretrained_init` is set; `wvn` when `use_wvn_conditioning` is.
    pub fn new(cfg: TrainingConfig, pretrained: Option<Generator>, wvn: Option<WvnModel>) -> Result<Self> {
        cfg.validate()?;
        let flags = cfg.ablation;
        let generator = match (flags.use_pretrained_init, pretrained) {
            (true, Some(g)) => g,
            (true, None) => {
                return Err(Error::InvalidConfig(
                    "use_pretrained_init needs a pretrained generator checkpoint".into(),
                ))
            }
            (false, _) => Generator::new(
                cfg.generator.clone(),
                &mut seeded(derive_seed(cfg.seed, "generator", 0)),
            )?,
        };
        let gate = if flags.use_wvn_conditioning {
            Some(init_gate(N_MELS, &mut seeded(derive_seed(cfg.seed, "gate", 0)))?)
        } else {
            None
        };
        let discriminators = DiscriminatorSet::new(
            &cfg.discriminators,
            &flags.families(),
            &mut seeded(derive_seed(cfg.seed, "discriminators", 0)),
        )?;
        Self::resume(cfg, generator, gate, wvn, discriminators, None, Progress::default())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn resume(
        cfg: TrainingConfig,
        generator: Generator,
        gate: Option<FusionGateParams>,
        wvn: Option<WvnModel>,
        discriminators: DiscriminatorSet,
        opt_states: Option<(crate::optim::AdamState, crate::optim::AdamState)>,
        progress: Progress,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.phase != Phase::Finetune {
            return Err(Error::InvalidConfig("finetuner needs phase = finetune".into()));
        }
        let flags = cfg.ablation;
        if flags.use_wvn_conditioning && wvn.is_none() {
            return Err(Error::MissingWvn);
        }
        if flags.use_wvn_conditioning != gate.is_some() {
            return Err(Error::InvalidConfig(
                "gate parameters must exist iff WVN conditioning is on".into(),
            ));
        }
        if discriminators.families() != flags.families() {
            return Err(Error::InvalidConfig(
                "discriminator families do not match the ablation flags".into(),
            ));
        }
        let mut opt_g = Adam::new(cfg.adam())?;
        let mut opt_d = Adam::new(cfg.adam())?;
        if let Some((g, d)) = opt_states {
            opt_g.load_state(g);
            opt_d.load_state(d);
        }
        Ok(Self {
            ctx: cfg.loss_context()?,
            cond: cfg.conditioning()?,
            cfg,
            generator,
            gate: if flags.use_wvn_conditioning { gate } else { None },
            wvn: if flags.use_wvn_conditioning { wvn } else { None },
            discriminators,
            opt_g,
            opt_d,
            progress,
        })
    }

    /// Conditioning mel for a noisy batch: `M_n` alone, or the gate's fusion
    /// of `M_n` with the mel of the WVN output.
    pub fn conditioning(&self, b: &mut Binder, noisy: &Tensor) -> Result<Var> {
        let m_n = conditioning_mel(&self.cond, noisy);
        match (&self.wvn, &self.gate) {
            (Some(wvn), Some(gate)) => {
                let mut enhanced = Vec::with_capacity(noisy.numel());
                for r in 0..noisy.dim(0) {
                    let w = WaveformSegment::at_8k(noisy.row(r).to_vec())?;
                    enhanced.extend_from_slice(wvn.enhance(&w)?.samples());
                }
                let m_w = conditioning_mel(&self.cond, &Tensor::new(noisy.shape(), enhanced)?);
                gate.forward(b, &m_n, &m_w)
            }
            _ => Ok(m_n),
        }
    }
}

impl Trainer for Finetuner {
    fn config(&self) -> &TrainingConfig {
        &self.cfg
    }
    fn progress(&self) -> Progress {
        self.progress
    }
    fn progress_mut(&mut self) -> &mut Progress {
        &mut self.progress
    }
    fn set_lr(&mut self, lr: f64) {
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
    }

    /// Discriminator step on the current estimate, then generator step
    /// against the updated discriminators.
    fn train_batch(&mut self, batch: &Batch) -> Result<StepLog> {
        let families = self.cfg.ablation.families();
        let use_mmd = self.cfg.ablation.use_mmd;
        let len = batch.clean.dim(1);
        let x = Var::constant(batch.clean.clone());
        let mel_x = Var::constant(self.ctx.phi(&x).value().clone());

        let mut bg = Binder::trainable();
        let cond = self.conditioning(&mut bg, &batch.noisy)?;
        let xhat = self.generator.forward(&mut bg, &cond)?.narrow_last(0, len);

        let xhat_d = xhat.detach();
        let mel_xhat_d = use_mmd.then(|| self.ctx.phi(&xhat_d));
        let mut bd = Binder::trainable();
        let real = self.discriminators.forward(&mut bd, &x, Some(&mel_x))?;
        let fake = self.discriminators.forward(&mut bd, &xhat_d, mel_xhat_d.as_ref())?;
        let d_loss = discriminator_total(&real, &fake, &families)?;
        let mut d_grads = bd.grads(&d_loss.backward());
        clip(&mut d_grads, self.cfg.grad_clip);
        self.opt_d.step(&mut self.discriminators, &d_grads);
        self.discriminators.update_spectral_norms();

        let mel_xhat = self.ctx.phi(&xhat);
        let mut frozen = Binder::frozen();
        let real = self.discriminators.forward(&mut frozen, &x, Some(&mel_x))?;
        let fake = self
            .discriminators
            .forward(&mut frozen, &xhat, use_mmd.then_some(&mel_xhat))?;
        let (g_loss, parts) = generator_total(
            &self.ctx,
            &x,
            &xhat,
            &mel_x,
            &mel_xhat,
            &real,
            &fake,
            &families,
            self.cfg.ablation.use_mrstft,
        )?;
        let mut g_grads = bg.grads(&g_loss.backward());
        clip(&mut g_grads, self.cfg.grad_clip);
        self.opt_g
            .step(&mut GenSide(&mut self.generator, &mut self.gate), &g_grads);

        Ok(StepLog {
            total: parts.total,
            mel: parts.mel,
            mrstft: parts.mrstft,
            adv: Some(parts.adv),
            fm: Some(parts.fm),
            disc: Some(d_loss.value().item()),
            ..Default::default()
        })
    }
}

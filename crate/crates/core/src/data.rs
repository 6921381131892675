//! Paired corpora, synthetic degradation, id-hash splits and cropped batches.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{bandlimit, WaveformSegment};
use crate::rng::{derive_seed, seeded, Rng};
use crate::{Error, Result, Tensor, SAMPLE_RATE};

/// Clip length after shaping: 4 s at 8 kHz.
pub const CLIP_LEN: usize = 32_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum TaskTag {
    Task1,
    Task2,
    Synthetic,
}

impl TaskTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Task1 => "task1",
            Self::Task2 => "task2",
            Self::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "task1" => Ok(Self::Task1),
            "task2" => Ok(Self::Task2),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::InvalidConfig(format!("unknown task tag {other:?}"))),
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub id: String,
    pub task: TaskTag,
    pub clean: WaveformSegment,
    pub noisy: WaveformSegment,
}

impl PairedExample {
    pub fn new(id: impl Into<String>, task: TaskTag, clean: WaveformSegment, noisy: WaveformSegment) -> Result<Self> {
        if clean.sample_rate() != noisy.sample_rate() {
            return Err(Error::SampleRate {
                expected: clean.sample_rate(),
                got: noisy.sample_rate(),
            });
        }
        if clean.len() != noisy.len() {
            return Err(Error::LengthMismatch {
                left: clean.len(),
                right: noisy.len(),
            });
        }
        Ok(Self {
            id: id.into(),
            task,
            clean,
            noisy,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NoiseKind {
    #[default]
    White,
    Pink,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DegradationSpec {
    pub cutoff_hz: f64,
    pub snr_db_range: (f64, f64),
    pub noise_kind: NoiseKind,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            cutoff_hz: 1000.0,
            snr_db_range: (-5.0, -1.0),
            noise_kind: NoiseKind::White,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let (low, high) = self.snr_db_range;
        if !(low.is_finite() && high.is_finite() && low <= high) {
            return Err(Error::InvalidConfig(format!(
                "snr_db_range ({low}, {high}) needs low <= high"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < nyquist) {
            return Err(Error::CutoffOutOfRange {
                cutoff: self.cutoff_hz,
                nyquist,
            });
        }
        Ok(())
    }
}

/// Everything [`degrade`] produced, for callers that audit the mix.
#[derive(Clone, Debug, PartialEq)]
pub struct Degraded {
    pub noisy: WaveformSegment,
    pub band_limited: WaveformSegment,
    pub noise: Vec<f64>,
    pub target_snr_db: f64,
}

/// `20 log10(rms(signal) / rms(noise))`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> Result<f64> {
    if signal.len() != noise.len() {
        return Err(Error::LengthMismatch {
            left: signal.len(),
            right: noise.len(),
        });
    }
    let es: f64 = signal.iter().map(|v| v * v).sum();
    let en: f64 = noise.iter().map(|v| v * v).sum();
    if es == 0.0 {
        return Err(Error::SilentSignal);
    }
    Ok(10.0 * (es / en).log10())
}

pub fn degrade(clean: &WaveformSegment, spec: &DegradationSpec, seed: u64) -> Result<WaveformSegment> {
    degrade_detailed(clean, spec, seed).map(|d| d.noisy)
}

/// Band-limits `clean`, then adds noise scaled to a uniform SNR draw.
pub fn degrade_detailed(clean: &WaveformSegment, spec: &DegradationSpec, seed: u64) -> Result<Degraded> {
    clean.require_rate(SAMPLE_RATE)?;
    spec.validate(clean.sample_rate())?;
    if clean.energy() == 0.0 {
        return Err(Error::SilentSignal);
    }
    let band_limited = bandlimit(clean, spec.cutoff_hz)?;
    let signal_rms = band_limited.rms();
    if signal_rms == 0.0 {
        return Err(Error::SilentSignal);
    }
    let mut rng = seeded(seed);
    let (low, high) = spec.snr_db_range;
    let target_snr_db = if low == high { low } else { rng.random_range(low..high) };
    let mut noise = match spec.noise_kind {
        NoiseKind::White => white_noise(clean.len(), &mut rng),
        NoiseKind::Pink => pink_noise(clean.len(), &mut rng),
    };
    let noise_rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
    let gain = signal_rms / noise_rms * 10f64.powf(-target_snr_db / 20.0);
    noise.iter_mut().for_each(|v| *v *= gain);
    let noisy = band_limited.samples().iter().zip(&noise).map(|(s, n)| s + n).collect();
    Ok(Degraded {
        noisy: WaveformSegment::new(noisy, clean.sample_rate())?,
        band_limited,
        noise,
        target_snr_db,
    })
}

pub fn white_noise(len: usize, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Approximately 1/f noise from white noise through a fixed pole bank.
pub fn pink_noise(len: usize, rng: &mut Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect()
}

/// Speech-like clean clip: a glottal harmonic series with vibrato, three
/// formant resonances, syllable-rate amplitude modulation and a faint
/// fricative noise floor. Peak amplitude is 0.5.
pub fn synth_clean_clip(len: usize, seed: u64) -> Result<WaveformSegment> {
    if len == 0 {
        return Err(Error::EmptyInput);
    }
    let sr = SAMPLE_RATE as f64;
    let mut rng = seeded(seed);
    let f0 = rng.random_range(90.0..220.0);
    let vib_rate = rng.random_range(3.0..6.0);
    let vib_depth = rng.random_range(0.02..0.06);
    let syl_rate = rng.random_range(2.5..5.0);
    let syl_phase = rng.random_range(0.0..2.0 * PI);
    let formants = [
        (rng.random_range(300.0..900.0), 120.0),
        (rng.random_range(900.0..2300.0), 180.0),
        (rng.random_range(2300.0..3400.0), 250.0),
    ];
    let n_harm = (3900.0 / (f0 * (1.0 + vib_depth))) as usize;
    let amps: Vec<f64> = (1..=n_harm)
        .map(|k| {
            let f = k as f64 * f0;
            let env: f64 = formants
                .iter()
                .map(|&(c, bw)| (-0.5 * ((f - c) / bw).powi(2)).exp())
                .sum();
            (0.05 + env) / (k as f64).sqrt()
        })
        .collect();
    let mut phase = 0.0f64;
    let mut x: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let inst = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * inst / sr;
            let voiced: f64 = amps
                .iter()
                .enumerate()
                .map(|(k, a)| a * ((k + 1) as f64 * phase).sin())
                .sum();
            let env = (PI * syl_rate * t + syl_phase).sin().abs().powf(0.6);
            let hiss: f64 = StandardNormal.sample(&mut rng);
            env * voiced + 0.02 * (1.0 - env) * hiss
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    WaveformSegment::at_8k(x)
}

/// `n` synthetic pairs with ids `syn_00000`, `syn_00001`, ...
pub fn synthesize_corpus(n: usize, clip_len: usize, spec: &DegradationSpec, seed: u64) -> Result<Vec<PairedExample>> {
    (0..n)
        .map(|i| {
            let clean = synth_clean_clip(clip_len, derive_seed(seed, "clean_clip", i as u64))?;
            let noisy = degrade(&clean, spec, derive_seed(seed, "degrade", i as u64))?;
            PairedExample::new(format!("syn_{i:05}"), TaskTag::Synthetic, clean, noisy)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
}

impl fmt::Display for SplitSizes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.train, self.validation)
    }
}

pub const TASK1_SPLIT: SplitSizes = SplitSizes {
    train: 5334,
    validation: 759,
};
pub const TASK2_SPLIT: SplitSizes = SplitSizes {
    train: 5229,
    validation: 749,
};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SplitRule {
    /// `floor(n * ratio)` training ids.
    Ratio(f64),
    /// Fixed sizes that must add up to the id count.
    Counts(SplitSizes),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

impl Split {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            validation: self.validation.len(),
        }
    }
}

fn id_hash(id: &str) -> u64 {
    derive_seed(0, id, 0)
}

/// Deterministic partition: ids ordered by a stable hash, the first block
/// trains. Both halves come back sorted by id.
pub fn split_ids(ids: &[String], rule: SplitRule) -> Result<Split> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::InvalidConfig("duplicate ids in split input".into()));
    }
    let n = ids.len();
    let n_train = match rule {
        SplitRule::Ratio(r) if (0.0..=1.0).contains(&r) => (n as f64 * r).floor() as usize,
        SplitRule::Ratio(r) => {
            return Err(Error::OutOfRange {
                what: "train ratio",
                value: r,
                low: 0.0,
                high: 1.0,
            })
        }
        SplitRule::Counts(s) if s.train + s.validation == n => s.train,
        SplitRule::Counts(s) => return Err(Error::InvalidConfig(format!("split counts {s} do not cover {n} ids"))),
    };
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort_by(|a, b| id_hash(a).cmp(&id_hash(b)).then_with(|| a.cmp(b)));
    let mut train: Vec<String> = order[..n_train].iter().map(|s| (*s).clone()).collect();
    let mut validation: Vec<String> = order[n_train..].iter().map(|s| (*s).clone()).collect();
    train.sort();
    validation.sort();
    Ok(Split { train, validation })
}

/// Ids present in both listings, sorted; any orphan on either side is an
/// error naming every orphan.
pub fn match_pair_ids(clean: &[String], noisy: &[String]) -> Result<Vec<String>> {
    let c: BTreeSet<&String> = clean.iter().collect();
    let n: BTreeSet<&String> = noisy.iter().collect();
    let orphans: Vec<String> = c.symmetric_difference(&n).map(|s| (*s).clone()).collect();
    if !orphans.is_empty() {
        return Err(Error::OrphanIds(orphans));
    }
    Ok(c.into_iter().cloned().collect())
}

/// Dense `[batch, crop_len]` views of clean and noisy audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub offsets: Vec<usize>,
    pub clean: Tensor,
    pub noisy: Tensor,
}

/// One epoch of batches. A trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchIterator<'a> {
    data: &'a [PairedExample],
    order: Vec<usize>,
    offsets: Vec<usize>,
    batch_size: usize,
    crop_len: usize,
    pos: usize,
}

pub fn batches_per_epoch(n_examples: usize, batch_size: usize) -> usize {
    n_examples / batch_size.max(1)
}

pub fn batch_iterator(
    data: &[PairedExample],
    batch_size: usize,
    crop_len: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIterator<'_>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 || crop_len == 0 {
        return Err(Error::InvalidConfig("batch_size and crop_len must be positive".into()));
    }
    if batch_size > data.len() {
        return Err(Error::BatchTooLarge {
            batch: batch_size,
            len: data.len(),
        });
    }
    if let Some(short) = data.iter().find(|e| e.len() < crop_len) {
        return Err(Error::WaveformTooShort {
            len: short.len(),
            min: crop_len,
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeded(derive_seed(seed, "shuffle", epoch)));
    let mut crop_rng = seeded(derive_seed(seed, "crop", epoch));
    let offsets = data
        .iter()
        .map(|e| crop_rng.random_range(0..=e.len() - crop_len))
        .collect();
    Ok(BatchIterator {
        data,
        order,
        offsets,
        batch_size,
        crop_len,
        pos: 0,
    })
}

impl BatchIterator<'_> {
    /// Crop offset drawn for dataset index `i` this epoch.
    pub fn offset_of(&self, i: usize) -> usize {
        self.offsets[i]
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        let (b, l) = (self.batch_size, self.crop_len);
        let mut clean = Vec::with_capacity(b * l);
        let mut noisy = Vec::with_capacity(b * l);
        let mut ids = Vec::with_capacity(b);
        let mut offsets = Vec::with_capacity(b);
        for &i in idx {
            let (e, o) = (&self.data[i], self.offsets[i]);
            clean.extend_from_slice(&e.clean.samples()[o..o + l]);
            noisy.extend_from_slice(&e.noisy.samples()[o..o + l]);
            ids.push(e.id.clone());
            offsets.push(o);
        }
        Some(Batch {
            ids,
            offsets,
            clean: Tensor::new(&[b, l], clean).expect("dense batch"),
            noisy: Tensor::new(&[b, l], noisy).expect("dense batch"),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos) / self.batch_size;
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchIterator<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Fft;
    use alloc::string::ToString;
    use num_complex::Complex64;

    fn tone(len: usize) -> WaveformSegment {
        let x = (0..len)
            .map(|i| 2f64.sqrt() * (2.0 * PI * 300.0 * i as f64 / 8000.0).sin())
            .collect();
        WaveformSegment::at_8k(x).unwrap()
    }

    /// Energy at or above `f_hz` from a Hann-windowed full-length DFT. The
    /// window keeps the clip's boundary jump from leaking into the stop band.
    fn energy_above(x: &[f64], f_hz: f64) -> f64 {
        let n = x.len();
        let mut buf: Vec<Complex64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| Complex64::new(v * (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()), 0.0))
            .collect();
        Fft::new(n).forward(&mut buf);
        let k0 = (f_hz * n as f64 / 8000.0).ceil() as usize;
        buf[k0..=n / 2].iter().map(|z| z.norm_sqr()).sum()
    }

    #[test]
    fn noise_scale_for_minus_five_db() {
        let spec = DegradationSpec {
            snr_db_range: (-5.0, -5.0),
            ..Default::default()
        };
        let d = degrade_detailed(&tone(8000), &spec, 3).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let ratio = rms(&d.noise) / rms(d.band_limited.samples());
        assert!((ratio - 1.778_279_41).abs() < 1e-6);
    }

    #[test]
    fn achieved_snr_and_stopband_suppression() {
        let spec = DegradationSpec::default();
        for i in 0..20u64 {
            let clean = synth_clean_clip(8192, i).unwrap();
            let d = degrade_detailed(&clean, &spec, 100 + i).unwrap();
            assert!((-5.0..=-1.0).contains(&d.target_snr_db));
            let got = snr_db(d.band_limited.samples(), &d.noise).unwrap();
            assert!((got - d.target_snr_db).abs() <= 0.1);
            let suppression =
                10.0 * (energy_above(clean.samples(), 1250.0) / energy_above(d.band_limited.samples(), 1250.0)).log10();
            assert!(suppression >= 40.0, "{suppression}");
        }
    }

    #[test]
    fn degrade_is_seeded_and_rejects_silence() {
        let spec = DegradationSpec {
            noise_kind: NoiseKind::Pink,
            ..Default::default()
        };
        let x = synth_clean_clip(4000, 9).unwrap();
        assert_eq!(degrade(&x, &spec, 5).unwrap(), degrade(&x, &spec, 5).unwrap());
        assert_ne!(degrade(&x, &spec, 5).unwrap(), degrade(&x, &spec, 6).unwrap());
        let err = degrade(&WaveformSegment::silence(4000, 8000), &spec, 1).unwrap_err();
        assert_eq!(err.to_string(), "SNR undefined for silent signal");
        let bad = DegradationSpec {
            snr_db_range: (-1.0, -5.0),
            ..Default::default()
        };
        assert!(degrade(&x, &bad, 1).is_err());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("clip_{i:04}")).collect()
    }

    #[test]
    fn ratio_split_floors_and_partitions() {
        let all = ids(100);
        let s = split_ids(&all, SplitRule::Ratio(0.875)).unwrap();
        assert_eq!(
            s.sizes(),
            SplitSizes {
                train: 87,
                validation: 13
            }
        );
        let mut joined: Vec<String> = s.train.iter().chain(&s.validation).cloned().collect();
        joined.sort();
        assert_eq!(joined, all);
        assert_eq!(s, split_ids(&all, SplitRule::Ratio(0.875)).unwrap());
    }

    #[test]
    fn count_split_echoes_corpus_sizes() {
        for sizes in [TASK1_SPLIT, TASK2_SPLIT] {
            let s = split_ids(&ids(sizes.train + sizes.validation), SplitRule::Counts(sizes)).unwrap();
            assert_eq!(s.sizes(), sizes);
        }
        assert_eq!(TASK1_SPLIT.to_string(), "5334/759");
        assert_eq!(TASK2_SPLIT.to_string(), "5229/749");
        assert!(split_ids(&ids(10), SplitRule::Counts(TASK1_SPLIT)).is_err());
    }

    #[test]
    fn orphans_are_listed() {
        let clean = ids(3);
        let noisy = alloc::vec!["clip_0000".into(), "clip_0001".into(), "extra".into()];
        match match_pair_ids(&clean, &noisy) {
            Err(Error::OrphanIds(o)) => assert_eq!(o, alloc::vec!["clip_0002".to_string(), "extra".into()]),
            other => panic!("{other:?}"),
        }
    }

    fn corpus(n: usize, len: usize) -> Vec<PairedExample> {
        (0..n)
            .map(|i| {
                let x = WaveformSegment::at_8k((0..len).map(|j| (i * len + j) as f64).collect()).unwrap();
                PairedExample::new(format!("e{i:03}"), TaskTag::Synthetic, x.clone(), x).unwrap()
            })
            .collect()
    }

    #[test]
    fn paper_batch_shape_and_errors() {
        let data = corpus(16, CLIP_LEN);
        let b = batch_iterator(&data, 16, CLIP_LEN, 1, 0).unwrap().next().unwrap();
        assert_eq!(b.clean.shape(), &[16, 32000]);
        assert!(matches!(
            batch_iterator(&data, 17, 100, 1, 0),
            Err(Error::BatchTooLarge { .. })
        ));
        assert!(matches!(batch_iterator(&[], 1, 100, 1, 0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn epochs_reshuffle_and_replay() {
        let data = corpus(100, 400);
        let a = batch_iterator(&data, 10, 64, 7, 0).unwrap();
        let b = batch_iterator(&data, 10, 64, 7, 1).unwrap();
        // Offsets are uniform over 337 values, so an expected 100/337 of the
        // examples collide; far fewer than all 100.
        let same = (0..100).filter(|&i| a.offset_of(i) == b.offset_of(i)).count();
        assert!(same < 10, "{same}");
        let x: Vec<Batch> = batch_iterator(&data, 10, 64, 7, 3).unwrap().collect();
        let y: Vec<Batch> = batch_iterator(&data, 10, 64, 7, 3).unwrap().collect();
        assert_eq!(x, y);
        assert_eq!(x.len(), 10);
        let seen: BTreeSet<&String> = x.iter().flat_map(|b| &b.ids).collect();
        assert_eq!(seen.len(), 100);
        // The crop really is the window at the reported offset.
        let e = data.iter().find(|e| e.id == x[0].ids[0]).unwrap();
        assert_eq!(
            x[0].clean.row(0),
            &e.clean.samples()[x[0].offsets[0]..x[0].offsets[0] + 64]
        );
    }
}

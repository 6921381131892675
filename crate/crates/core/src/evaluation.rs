//! Built-in metrics, score normalization and task/weighted aggregation, plus
//! a seam for external perceptual predictors.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;

use crate::audio::{mfcc, WaveformSegment};
use crate::data::TaskTag;
use crate::losses::{mel_l1_weighted, mrstft, LossWeights, MrStftConfig};
use crate::{Error, Result, SAMPLE_RATE};

pub const PESQ_RANGE: (f64, f64) = (1.0, 4.5);
pub const DNSMOS_RANGE: (f64, f64) = (1.0, 5.0);
/// Task 1 and task 2 weights in the overall score.
pub const TASK_WEIGHTS: (f64, f64) = (0.4, 0.6);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Metric {
    Pesq,
    Estoi,
    Dnsmos,
    CsMfcc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pesq => "pesq",
            Self::Estoi => "estoi",
            Self::Dnsmos => "dnsmos",
            Self::CsMfcc => "cs_mfcc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Self::Pesq, Self::Estoi, Self::Dnsmos, Self::CsMfcc]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown metric {s:?}")))
    }
}

fn check_range(what: &'static str, value: f64, (low, high): (f64, f64)) -> Result<f64> {
    if value.is_finite() && (low..=high).contains(&value) {
        Ok(value)
    } else {
        Err(Error::OutOfRange { what, value, low, high })
    }
}

fn check_pair(clean: &WaveformSegment, enhanced: &WaveformSegment) -> Result<()> {
    clean.require_rate(SAMPLE_RATE)?;
    enhanced.require_rate(SAMPLE_RATE)?;
    if clean.len() != enhanced.len() {
        return Err(Error::LengthMismatch {
            left: clean.len(),
            right: enhanced.len(),
        });
    }
    Ok(())
}

/// Frame-averaged cosine similarity of 13-coefficient MFCC vectors.
pub fn mfcc_cosine(clean: &WaveformSegment, enhanced: &WaveformSegment) -> Result<f64> {
    check_pair(clean, enhanced)?;
    let (a, b) = (mfcc(clean)?, mfcc(enhanced)?);
    let (n_coef, frames) = (a.dim(0), a.dim(1));
    let col = |t: &crate::Tensor, f: usize| -> Vec<f64> { (0..n_coef).map(|k| t.data()[k * frames + f]).collect() };
    let total: f64 = (0..frames)
        .map(|f| {
            let (u, v) = (col(&a, f), col(&b, f));
            let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
            let na = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            match (na > 0.0, nb > 0.0) {
                (true, true) => dot / (na * nb),
                (false, false) => 1.0,
                _ => 0.0,
            }
        })
        .sum();
    Ok(total / frames as f64)
}

pub fn normalize_pesq(p: f64) -> Result<f64> {
    check_range("PESQ", p, PESQ_RANGE).map(|p| (p - 1.0) / 3.5)
}

pub fn normalize_dnsmos(d: f64) -> Result<f64> {
    check_range("DNSMOS", d, DNSMOS_RANGE).map(|d| (d - 1.0) / 4.0)
}

/// `((p - 1) / 3.5, (d - 1) / 4)`.
pub fn normalize_scores(pesq: f64, dnsmos: f64) -> Result<(f64, f64)> {
    Ok((normalize_pesq(pesq)?, normalize_dnsmos(dnsmos)?))
}

/// Equal-weight mean of normalized PESQ, normalized DNSMOS, MFCC cosine
/// (negative values count as 0) and ESTOI.
pub fn task_score(pesq_n: Option<f64>, dnsmos_n: Option<f64>, cs: Option<f64>, estoi: Option<f64>) -> Result<f64> {
    let named = [
        ("pesq", pesq_n),
        ("dnsmos", dnsmos_n),
        ("cs_mfcc", cs),
        ("estoi", estoi),
    ];
    let missing: Vec<&'static str> = named
        .iter()
        .filter(|(_, v)| !v.is_some_and(f64::is_finite))
        .map(|(n, _)| *n)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingMetric(missing));
    }
    let unit = (0.0, 1.0);
    let p = check_range("normalized PESQ", pesq_n.unwrap_or_default(), unit)?;
    let d = check_range("normalized DNSMOS", dnsmos_n.unwrap_or_default(), unit)?;
    let c = check_range("MFCC cosine", cs.unwrap_or_default(), (-1.0, 1.0))?.max(0.0);
    let e = check_range("ESTOI", estoi.unwrap_or_default(), unit)?;
    Ok((p + d + c + e) / 4.0)
}

/// `0.4 * task1 + 0.6 * task2`.
pub fn weighted_score(task1: f64, task2: f64) -> Result<f64> {
    let t1 = check_range("task 1 score", task1, (0.0, 1.0))?;
    let t2 = check_range("task 2 score", task2, (0.0, 1.0))?;
    Ok(TASK_WEIGHTS.0 * t1 + TASK_WEIGHTS.1 * t2)
}

/// Scalar quality predictor supplied from outside the crate.
pub trait MetricProvider: Send + Sync {
    fn metric(&self) -> Metric;
    fn evaluate(&self, clean: &WaveformSegment, enhanced: &WaveformSegment) -> core::result::Result<f64, String>;
}

/// Result of asking a provider: a value, or absence with the reason.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricOutcome {
    pub value: Option<f64>,
    pub diagnostic: Option<String>,
}

impl MetricOutcome {
    fn absent(why: String) -> Self {
        Self {
            value: None,
            diagnostic: Some(why),
        }
    }
}

#[derive(Default)]
pub struct ProviderRegistry {
    providers: BTreeMap<String, Box<dyn MetricProvider>>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: impl Into<String>, provider: Box<dyn MetricProvider>) {
        self.providers.insert(id.into(), provider);
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.providers.keys().map(String::as_str)
    }

    /// Provider id registered for `metric`, if any.
    pub fn provider_for(&self, metric: Metric) -> Option<&str> {
        self.providers
            .iter()
            .find(|(_, p)| p.metric() == metric)
            .map(|(id, _)| id.as_str())
    }

    /// Never fails: unknown ids, provider errors and non-finite values all
    /// come back as absent with a diagnostic.
    pub fn external_metric(&self, id: &str, clean: &WaveformSegment, enhanced: &WaveformSegment) -> MetricOutcome {
        let Some(p) = self.providers.get(id) else {
            return MetricOutcome::absent(format!("provider {id:?} not registered"));
        };
        match p.evaluate(clean, enhanced) {
            Ok(v) if v.is_finite() => MetricOutcome {
                value: Some(v),
                diagnostic: None,
            },
            Ok(v) => MetricOutcome::absent(format!("provider {id:?} returned {v}")),
            Err(e) => MetricOutcome::absent(format!("provider {id:?} failed: {e}")),
        }
    }
}

/// Raw and normalized metrics for one (clean, enhanced) pair.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PairMetrics {
    pub id: String,
    pub task: TaskTag,
    pub cs_mfcc: f64,
    pub mel_l1: f64,
    pub mrstft: f64,
    /// Absent when the enhanced signal matches the clean one exactly.
    pub snr_db: Option<f64>,
    pub pesq: Option<f64>,
    pub estoi: Option<f64>,
    pub dnsmos: Option<f64>,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormalizedMetrics {
    pub pesq: Option<f64>,
    pub dnsmos: Option<f64>,
    pub cs_mfcc: f64,
    pub estoi: Option<f64>,
}

impl PairMetrics {
    pub fn normalized(&self) -> NormalizedMetrics {
        NormalizedMetrics {
            pesq: self.pesq.and_then(|p| normalize_pesq(p).ok()),
            dnsmos: self.dnsmos.and_then(|d| normalize_dnsmos(d).ok()),
            cs_mfcc: self.cs_mfcc.max(0.0),
            estoi: self.estoi,
        }
    }
}

/// Built-in metrics, then every registered provider for PESQ, ESTOI and
/// DNSMOS.
pub fn evaluate_pair(
    id: &str,
    task: TaskTag,
    clean: &WaveformSegment,
    enhanced: &WaveformSegment,
    providers: &ProviderRegistry,
) -> Result<PairMetrics> {
    check_pair(clean, enhanced)?;
    let unit = LossWeights {
        lambda_mel: 1.0,
        lambda_stft: 1.0,
        w_high: 1.0,
        ..LossWeights::default()
    };
    let residual: Vec<f64> = clean
        .samples()
        .iter()
        .zip(enhanced.samples())
        .map(|(c, e)| e - c)
        .collect();
    let snr_db = match crate::data::snr_db(clean.samples(), &residual) {
        Ok(v) if v.is_finite() => Some(v),
        _ => None,
    };
    let mut m = PairMetrics {
        id: id.to_string(),
        task,
        cs_mfcc: mfcc_cosine(clean, enhanced)?,
        mel_l1: mel_l1_weighted(clean, enhanced, unit)?,
        mrstft: mrstft(clean, enhanced, &MrStftConfig::default(), unit)?,
        snr_db,
        pesq: None,
        estoi: None,
        dnsmos: None,
        diagnostics: Vec::new(),
    };
    for metric in [Metric::Pesq, Metric::Estoi, Metric::Dnsmos] {
        let Some(pid) = providers.provider_for(metric) else {
            m.diagnostics.push(format!("{}: no provider registered", metric.name()));
            continue;
        };
        let out = providers.external_metric(pid, clean, enhanced);
        m.diagnostics.extend(out.diagnostic);
        let slot = match metric {
            Metric::Pesq => &mut m.pesq,
            Metric::Estoi => &mut m.estoi,
            _ => &mut m.dnsmos,
        };
        *slot = out.value;
    }
    Ok(m)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-task means and the task score, or the reason it is missing.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskSummary {
    pub pairs: usize,
    pub pesq: Option<f64>,
    pub estoi: Option<f64>,
    pub dnsmos: Option<f64>,
    pub cs_mfcc: f64,
    pub mel_l1: f64,
    pub mrstft: f64,
    pub score: Option<f64>,
    pub score_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub per_task: BTreeMap<TaskTag, TaskSummary>,
    pub weighted_score: Option<f64>,
}

impl MetricReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Self {
        let mut per_task = BTreeMap::new();
        let mut tasks: Vec<TaskTag> = pairs.iter().map(|p| p.task).collect();
        tasks.sort();
        tasks.dedup();
        for task in tasks {
            let group: Vec<&PairMetrics> = pairs.iter().filter(|p| p.task == task).collect();
            let n = group.len() as f64;
            let pesq = mean(group.iter().map(|p| p.pesq));
            let estoi = mean(group.iter().map(|p| p.estoi));
            let dnsmos = mean(group.iter().map(|p| p.dnsmos));
            let cs_mfcc = group.iter().map(|p| p.cs_mfcc).sum::<f64>() / n;
            let score = normalize_optional(pesq, normalize_pesq).and_then(|p| {
                let d = normalize_optional(dnsmos, normalize_dnsmos)?;
                task_score(p, d, Some(cs_mfcc), estoi)
            });
            per_task.insert(
                task,
                TaskSummary {
                    pairs: group.len(),
                    pesq,
                    estoi,
                    dnsmos,
                    cs_mfcc,
                    mel_l1: group.iter().map(|p| p.mel_l1).sum::<f64>() / n,
                    mrstft: group.iter().map(|p| p.mrstft).sum::<f64>() / n,
                    score: score.as_ref().ok().copied(),
                    score_error: score.err().map(|e| e.to_string()),
                },
            );
        }
        let score_of = |t| per_task.get(&t).and_then(|s: &TaskSummary| s.score);
        let weighted_score = match (score_of(TaskTag::Task1), score_of(TaskTag::Task2)) {
            (Some(a), Some(b)) => weighted_score(a, b).ok(),
            _ => None,
        };
        Self {
            pairs,
            per_task,
            weighted_score,
        }
    }
}

fn normalize_optional(v: Option<f64>, f: fn(f64) -> Result<f64>) -> Result<Option<f64>> {
    v.map(f).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use core::f64::consts::PI;

    fn tone(len: usize, amp: f64) -> WaveformSegment {
        let x = (0..len)
            .map(|i| {
                let t = i as f64 / 8000.0;
                amp * ((2.0 * PI * 440.0 * t).sin() + 0.5 * (2.0 * PI * 1320.0 * t).sin())
            })
            .collect();
        WaveformSegment::at_8k(x).unwrap()
    }

    fn noise(len: usize, seed: u64) -> WaveformSegment {
        WaveformSegment::at_8k(normal_tensor(&[len], 0.3, &mut seeded(seed)).into_data()).unwrap()
    }

    #[test]
    fn mfcc_cosine_cases() {
        let x = tone(8000, 0.5);
        assert!((mfcc_cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        // Halving the gain moves only c0, by sqrt(80) ln 2; the cosine then
        // depends on |c0|, so the bound is checked at a typical speech level.
        let z = crate::data::synth_clean_clip(8000, 3).unwrap();
        let z = WaveformSegment::at_8k(z.samples().iter().map(|v| v * 0.4).collect()).unwrap();
        let zh = WaveformSegment::at_8k(z.samples().iter().map(|v| v * 0.5).collect()).unwrap();
        assert!(mfcc_cosine(&z, &zh).unwrap() >= 0.999);
        let cs = mfcc_cosine(&x, &noise(8000, 4)).unwrap();
        assert!(cs < 0.9, "{cs}");
        assert!(matches!(
            mfcc_cosine(&x, &tone(4000, 0.5)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_scores(4.5, 5.0).unwrap(), (1.0, 1.0));
        assert_eq!(normalize_scores(1.0, 1.0).unwrap(), (0.0, 0.0));
        assert!((normalize_dnsmos(2.688).unwrap() - 0.422).abs() < 1e-12);
        assert!((normalize_pesq(1.310).unwrap() - 0.0886).abs() < 5e-5);
        assert!(normalize_pesq(4.6).is_err());
        assert!(normalize_dnsmos(0.9).is_err());
        assert!(normalize_pesq(f64::NAN).is_err());
    }

    #[test]
    fn task_scores() {
        assert_eq!(task_score(Some(1.0), Some(1.0), Some(1.0), Some(1.0)).unwrap(), 1.0);
        assert_eq!(task_score(Some(0.0), Some(0.0), Some(0.0), Some(0.0)).unwrap(), 0.0);
        let s = task_score(Some(0.0886), Some(0.422), Some(0.669), Some(0.190)).unwrap();
        assert!((s - 0.3424).abs() < 5e-5);
        assert!((task_score(Some(0.2), Some(0.2), Some(-0.5), Some(0.2)).unwrap() - 0.15).abs() < 1e-15);
        match task_score(Some(0.2), None, Some(0.1), None) {
            Err(e @ Error::MissingMetric(_)) => {
                assert!(e.to_string().starts_with("task score requires all four metrics"));
                assert_eq!(e, Error::MissingMetric(alloc::vec!["dnsmos", "estoi"]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weighted_scores() {
        assert!((weighted_score(0.387, 0.297).unwrap() - 0.333).abs() < 5e-4);
        assert!((weighted_score(0.309, 0.228).unwrap() - 0.2604).abs() < 5e-5);
        assert_eq!(weighted_score(1.0, 1.0).unwrap(), 1.0);
        assert!(weighted_score(1.1, 0.5).is_err());
    }

    struct Fixed(Metric, f64);

    impl MetricProvider for Fixed {
        fn metric(&self) -> Metric {
            self.0
        }
        fn evaluate(&self, _: &WaveformSegment, _: &WaveformSegment) -> core::result::Result<f64, String> {
            Ok(self.1)
        }
    }

    struct Broken;

    impl MetricProvider for Broken {
        fn metric(&self) -> Metric {
            Metric::Estoi
        }
        fn evaluate(&self, _: &WaveformSegment, _: &WaveformSegment) -> core::result::Result<f64, String> {
            Err("exit status 1".into())
        }
    }

    #[test]
    fn providers() {
        let x = tone(4000, 0.3);
        let mut reg = ProviderRegistry::new();
        assert_eq!(reg.external_metric("pesq", &x, &x).value, None);
        reg.register("echo", Box::new(Fixed(Metric::Pesq, 2.0)));
        reg.register("nan", Box::new(Fixed(Metric::Dnsmos, f64::NAN)));
        reg.register("broken", Box::new(Broken));
        assert_eq!(reg.external_metric("echo", &x, &x).value, Some(2.0));
        let nan = reg.external_metric("nan", &x, &x);
        assert!(nan.value.is_none() && nan.diagnostic.is_some());
        let m = evaluate_pair("a", TaskTag::Task1, &x, &x, &reg).unwrap();
        assert_eq!(m.pesq, Some(2.0));
        assert_eq!((m.estoi, m.dnsmos), (None, None));
        assert_eq!(m.diagnostics.len(), 2);
        assert!((m.cs_mfcc - 1.0).abs() < 1e-12);
        assert_eq!(m.mel_l1, 0.0);
        assert_eq!(m.snr_db, None);
    }

    #[test]
    fn report_aggregates() {
        let mk = |task, cs| PairMetrics {
            id: "x".into(),
            task,
            cs_mfcc: cs,
            mel_l1: 0.0,
            mrstft: 0.0,
            snr_db: None,
            pesq: Some(4.5),
            estoi: Some(1.0),
            dnsmos: Some(5.0),
            diagnostics: Vec::new(),
        };
        let r = MetricReport::from_pairs(alloc::vec![mk(TaskTag::Task1, 1.0), mk(TaskTag::Task2, 1.0)]);
        assert_eq!(r.per_task[&TaskTag::Task1].score, Some(1.0));
        assert_eq!(r.weighted_score, Some(1.0));
        let r = MetricReport::from_pairs(alloc::vec![PairMetrics {
            pesq: None,
            ..mk(TaskTag::Task1, 0.5)
        }]);
        assert!(r.per_task[&TaskTag::Task1].score_error.is_some());
        assert_eq!(r.weighted_score, None);
    }
}

//! On-disk corpora.
//!
//! Layout: `<root>/clean/<id>.wav`, `<root>/noisy/<id>.wav` and
//! `<root>/manifest.json`. A directory with only `clean/` is degraded on
//! load with the configured [`DegradationSpec`]. The manifest fixes ids,
//! task tags and the train/validation assignment; it is written on first
//! open and reused afterwards.

use std::fs;
use std::path::{Path, PathBuf};

use radgan_core::audio::{shape_segment, ShapeMode, WaveformSegment};
use radgan_core::data::{
    degrade_detailed, match_pair_ids, split_ids, synth_clean_clip, DegradationSpec, PairedExample, SplitRule,
    SplitSizes, TaskTag,
};
use radgan_core::rng::derive_seed;
use radgan_core::SAMPLE_RATE;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::wav::{read_wav, write_wav};

pub const MANIFEST: &str = "manifest.json";
pub const CLEAN_DIR: &str = "clean";
pub const NOISY_DIR: &str = "noisy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub task: TaskTag,
    pub split: SplitName,
    /// Drawn SNR for pairs this tool degraded.
    pub target_snr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub sample_rate: u32,
    pub clip_len: usize,
    /// Set when noisy audio was, or is to be, derived from clean audio.
    pub degradation: Option<DegradationSpec>,
    pub split: SplitRule,
    pub sizes: SplitSizes,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn read(root: &Path) -> Result<Option<Self>> {
        let p = root.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(Error::io(&p))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let p = root.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&p, text + "\n").map_err(Error::io(&p))
    }

    pub fn task_of(&self, id: &str) -> Option<TaskTag> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.task)
    }
}

fn assemble(
    seed: u64,
    data: &DataConfig,
    degradation: Option<DegradationSpec>,
    ids: &[String],
    snr: impl Fn(&str) -> Option<f64>,
) -> Result<CorpusManifest> {
    let split = split_ids(ids, data.split)?;
    let mut entries: Vec<ManifestEntry> = ids
        .iter()
        .map(|id| ManifestEntry {
            id: id.clone(),
            task: data.task,
            split: if split.train.contains(id) {
                SplitName::Train
            } else {
                SplitName::Validation
            },
            target_snr_db: snr(id),
        })
        .collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(CorpusManifest {
        seed,
        sample_rate: SAMPLE_RATE,
        clip_len: data.clip_len,
        degradation,
        split: data.split,
        sizes: split.sizes(),
        entries,
    })
}

/// Writes `data.clips` synthetic pairs plus the manifest under `root`.
/// Output is a pure function of `(data, seed)`.
pub fn synthesize_to_dir(root: &Path, data: &DataConfig, seed: u64) -> Result<CorpusManifest> {
    for d in [CLEAN_DIR, NOISY_DIR] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(Error::io(&p))?;
    }
    let mut ids = Vec::with_capacity(data.clips);
    let mut snrs = Vec::with_capacity(data.clips);
    for i in 0..data.clips {
        let id = format!("syn_{i:05}");
        let clean = synth_clean_clip(data.clip_len, derive_seed(seed, "clean_clip", i as u64))?;
        let d = degrade_detailed(&clean, &data.degradation, derive_seed(seed, "degrade", i as u64))?;
        write_wav(&root.join(CLEAN_DIR).join(format!("{id}.wav")), &clean)?;
        write_wav(&root.join(NOISY_DIR).join(format!("{id}.wav")), &d.noisy)?;
        snrs.push(d.target_snr_db);
        ids.push(id);
    }
    let synthetic = DataConfig {
        task: TaskTag::Synthetic,
        ..data.clone()
    };
    let manifest = assemble(seed, &synthetic, Some(data.degradation), &ids, |id| {
        ids.iter().position(|x| x == id).map(|i| snrs[i])
    })?;
    manifest.write(root)?;
    Ok(manifest)
}

fn wav_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// A loaded corpus: its manifest and shaped pairs per split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    pub train: Vec<PairedExample>,
    pub validation: Vec<PairedExample>,
}

impl Corpus {
    /// Opens `root`, creating its manifest on first use.
    pub fn open(root: &Path, data: &DataConfig, seed: u64) -> Result<Self> {
        let clean_dir = root.join(CLEAN_DIR);
        let noisy_dir = root.join(NOISY_DIR);
        if !clean_dir.is_dir() {
            return Err(Error::Other(format!("{} is missing", clean_dir.display())));
        }
        let manifest = match CorpusManifest::read(root)? {
            Some(m) => m,
            None => {
                let clean_ids = wav_ids(&clean_dir)?;
                let (ids, degradation) = if noisy_dir.is_dir() {
                    (match_pair_ids(&clean_ids, &wav_ids(&noisy_dir)?)?, None)
                } else {
                    (clean_ids, Some(data.degradation))
                };
                let m = assemble(seed, data, degradation, &ids, |_| None)?;
                m.write(root)?;
                m
            }
        };
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for (i, e) in manifest.entries.iter().enumerate() {
            let pair = load_pair(root, &manifest, i, e)?;
            match e.split {
                SplitName::Train => train.push(pair),
                SplitName::Validation => validation.push(pair),
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            train,
            validation,
        })
    }
}

fn load_pair(root: &Path, m: &CorpusManifest, index: usize, e: &ManifestEntry) -> Result<PairedExample> {
    let shape = |w: WaveformSegment| -> Result<WaveformSegment> {
        w.require_rate(SAMPLE_RATE)?;
        Ok(shape_segment(&w, m.clip_len, ShapeMode::ClipOrPad, 0)?)
    };
    let clean = shape(read_wav(&root.join(CLEAN_DIR).join(format!("{}.wav", e.id)))?)?;
    let noisy_path = root.join(NOISY_DIR).join(format!("{}.wav", e.id));
    let noisy = match (&m.degradation, noisy_path.exists()) {
        (_, true) => shape(read_wav(&noisy_path)?)?,
        (Some(spec), false) => degrade_detailed(&clean, spec, derive_seed(m.seed, "degrade", index as u64))?.noisy,
        (None, false) => return Err(radgan_core::Error::OrphanIds(vec![e.id.clone()]).into()),
    };
    Ok(PairedExample::new(e.id.clone(), e.task, clean, noisy)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn small() -> DataConfig {
        DataConfig {
            clips: 8,
            clip_len: 1200,
            ..RunConfig::toy().data
        }
    }

    #[test]
    fn synthetic_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthesize_to_dir(dir.path(), &small(), 5).unwrap();
        assert_eq!(m.entries.len(), 8);
        assert_eq!(
            m.sizes,
            SplitSizes {
                train: 7,
                validation: 1
            }
        );
        assert_eq!(m.degradation.unwrap().snr_db_range, (-5.0, -1.0));
        assert!(m
            .entries
            .iter()
            .all(|e| (-5.0..-1.0).contains(&e.target_snr_db.unwrap())));
        let c = Corpus::open(dir.path(), &small(), 99).unwrap();
        assert_eq!((c.train.len(), c.validation.len()), (7, 1));
        assert_eq!(c.manifest, m);
        assert!(c.train.iter().all(|p| p.len() == 1200 && p.task == TaskTag::Synthetic));
    }

    #[test]
    fn orphans_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_to_dir(dir.path(), &small(), 5).unwrap();
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        fs::remove_file(dir.path().join(NOISY_DIR).join("syn_00003.wav")).unwrap();
        let e = Corpus::open(dir.path(), &small(), 5).unwrap_err();
        assert!(matches!(e, Error::Core(radgan_core::Error::OrphanIds(ref ids)) if ids == &["syn_00003"]));
    }

    #[test]
    fn clean_only_directory_is_degraded_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_to_dir(dir.path(), &small(), 5).unwrap();
        fs::remove_dir_all(dir.path().join(NOISY_DIR)).unwrap();
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        let data = DataConfig {
            task: TaskTag::Task2,
            ..small()
        };
        let a = Corpus::open(dir.path(), &data, 1).unwrap();
        let b = Corpus::open(dir.path(), &data, 1).unwrap();
        assert_eq!(a.train, b.train);
        assert!(a.manifest.degradation.is_some());
        assert!(a.train.iter().all(|p| p.task == TaskTag::Task2 && p.noisy != p.clean));
    }

    #[test]
    fn given_counts_are_honored() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_to_dir(dir.path(), &small(), 5).unwrap();
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        let data = DataConfig {
            split: SplitRule::Counts(SplitSizes {
                train: 5,
                validation: 3,
            }),
            ..small()
        };
        let c = Corpus::open(dir.path(), &data, 5).unwrap();
        assert_eq!(c.manifest.sizes.to_string(), "5/3");
    }
}

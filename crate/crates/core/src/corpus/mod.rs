//! Corpus ingestion: manifests, audio I/O, resampling, speaker-disjoint
//! splitting and the synthetic phonation corpus.

mod audio;
mod resample;
pub mod synth;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use audio::{read_wav, rms, write_wav, AudioClip};
pub use resample::{resample, resample_by_ratio, WORKING_RATE};
pub use synth::{
    build_synthetic_banks, build_synthetic_corpus, build_synthetic_corpus_with, derive_seed, load_synthesis_params,
    synthesize_phonation, PhonationParams, SyntheticCorpusOptions, MANIFEST_FILE,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Dysphonic,
}

impl Label {
    /// Class index used by the classifier output: 0 = healthy, 1 = dysphonic.
    pub fn index(self) -> usize {
        match self {
            Label::Healthy => 0,
            Label::Dysphonic => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Healthy
        } else {
            Label::Dysphonic
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Healthy => "healthy",
            Label::Dysphonic => "dysphonic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Female => "female",
            Gender::Male => "male",
        })
    }
}

/// One recording of a sustained /a/.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub speaker_id: String,
    pub session_id: String,
    pub label: Label,
    pub gender: Gender,
    pub corpus: String,
    pub path: PathBuf,
    pub sample_rate: u32,
    pub duration: f64,
}

impl ManifestRecord {
    /// `speaker_id/session_id`, unique within a manifest.
    pub fn recording_id(&self) -> String {
        format!("{}/{}", self.speaker_id, self.session_id)
    }

    /// Resolves `path` against the manifest directory when it is relative.
    pub fn resolve_path(&self, base: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            base.join(&self.path)
        }
    }

    /// Loads the audio and brings it to the working rate.
    pub fn load_audio(&self, base: &Path) -> Result<AudioClip> {
        let clip = read_wav(&self.resolve_path(base))?;
        resample(&clip, WORKING_RATE)
    }
}

fn check_record(r: &ManifestRecord) -> std::result::Result<(), String> {
    if r.sample_rate == 0 {
        return Err("sample_rate must be positive".into());
    }
    if !(r.duration > 0.0 && r.duration.is_finite()) {
        return Err("duration must be positive".into());
    }
    if r.speaker_id.is_empty() {
        return Err("empty speaker_id".into());
    }
    Ok(())
}

/// Parses a line-delimited JSON manifest. Blank lines and lines starting with
/// `#` are header/comment lines and are skipped.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
        check_record(&rec).map_err(err)?;
        if !seen.insert((rec.speaker_id.clone(), rec.session_id.clone())) {
            return Err(err(format!(
                "duplicate (speaker_id, session_id) = ({}, {})",
                rec.speaker_id, rec.session_id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

/// Writes a manifest; `header` lines are emitted as `# ` comments first.
pub fn save_manifest(path: &Path, header: &[String], records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for h in header {
        writeln!(buf, "# {h}").expect("write to vec");
    }
    for r in records {
        let line = serde_json::to_string(r).expect("manifest record serializes");
        writeln!(buf, "{line}").expect("write to vec");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 250,
        }
    }
}

/// Splits records so no speaker appears on both sides. The number of train
/// speakers is `round(fraction * speakers)` with halves rounded toward train,
/// clamped so that each side keeps at least one speaker.
pub fn split_speaker_disjoint(
    records: &[ManifestRecord],
    spec: SplitSpec,
) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction must lie in (0, 1)"));
    }
    let speakers: BTreeSet<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
    if speakers.len() < 2 {
        return Err(Error::Insufficient(format!(
            "speaker-disjoint split needs at least 2 speakers, got {}",
            speakers.len()
        )));
    }
    let mut order: Vec<&str> = speakers.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let n = order.len();
    let n_train = ((spec.train_fraction * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
    let train_speakers: HashSet<&str> = order[..n_train].iter().copied().collect();
    let (train, val) = records
        .iter()
        .cloned()
        .partition(|r| train_speakers.contains(r.speaker_id.as_str()));
    Ok((train, val))
}

/// Peak absolute level of every recording, kept as metadata (recordings are
/// not normalized).
pub fn peak_levels(records: &[ManifestRecord], base: &Path) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| read_wav(&r.resolve_path(base)).map(|c| c.peak()))
        .collect()
}

/// Manifest records with their audio loaded at the working rate.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    records: Vec<ManifestRecord>,
    clips: Vec<AudioClip>,
}

impl LoadedCorpus {
    pub fn load(records: Vec<ManifestRecord>, base: &Path) -> Result<Self> {
        let clips = records.iter().map(|r| r.load_audio(base)).collect::<Result<_>>()?;
        Ok(Self { records, clips })
    }

    pub fn from_clips(records: Vec<ManifestRecord>, clips: Vec<AudioClip>) -> Result<Self> {
        if records.len() != clips.len() {
            return Err(Error::invalid("records and clips differ in length"));
        }
        Ok(Self { records, clips })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn clips(&self) -> &[AudioClip] {
        &self.clips
    }
}

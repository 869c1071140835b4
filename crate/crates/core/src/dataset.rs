//! VCTK ingestion: speaker subset selection, train/test split, manifests and
//! batch sampling for every training stage.
//!
//! Expected corpus layout (both public VCTK releases are accepted):
//!
//! ```text
//! <root>/speaker-info.txt           ID AGE GENDER ACCENTS ...
//! <root>/wav48_silence_trimmed/p225/p225_001_mic1.flac
//! <root>/wav48/p225/p225_001.wav
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    compute_spectrogram, load_waveform, resampled_len, sample_segment, NormStats, Spectrogram,
    StftConfig,
};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Female => "F",
            Gender::Male => "M",
        })
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F" | "FEMALE" => Ok(Gender::Female),
            "M" | "MALE" => Ok(Gender::Male),
            other => Err(Error::Validation(format!("unknown gender {other:?}"))),
        }
    }
}

/// A speaker of the selected subset. `index` is the row in every embedding table.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpeakerId {
    pub index: usize,
    pub code: String,
    pub gender: Gender,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker: String,
    pub index: usize,
    pub gender: Gender,
    pub path: PathBuf,
    pub split: Split,
}

impl UtteranceRecord {
    pub fn speaker_id(&self) -> SpeakerId {
        SpeakerId {
            index: self.index,
            code: self.speaker.clone(),
            gender: self.gender,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestOptions {
    pub seed: u64,
    pub per_gender: usize,
    pub train_fraction: f64,
    pub stft: StftConfig,
    /// Utterances with fewer frames are excluded.
    pub min_frames: usize,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        ManifestOptions {
            seed: 0,
            per_gender: 10,
            train_fraction: 0.9,
            stft: StftConfig::default(),
            min_frames: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Ordered by index.
    pub speakers: Vec<SpeakerId>,
    pub records: Vec<UtteranceRecord>,
}

/// Outcome of [`build_manifest`], including what was left out and why.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestReport {
    pub manifest: Manifest,
    pub skipped_unreadable: usize,
    pub excluded_short: usize,
}

struct CorpusSpeaker {
    code: String,
    gender: Gender,
    utterances: Vec<PathBuf>,
    unreadable: usize,
    short: usize,
}

fn read_speaker_info(root: &Path) -> Result<BTreeMap<String, Gender>> {
    let path = root.join("speaker-info.txt");
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let mut fields = line.split_whitespace();
        let (Some(id), Some(_age), Some(gender)) = (fields.next(), fields.next(), fields.next())
        else {
            continue;
        };
        if id.eq_ignore_ascii_case("ID") {
            continue;
        }
        let Ok(gender) = gender.parse::<Gender>() else {
            continue;
        };
        let code = if id.starts_with(|c: char| c.is_ascii_digit()) {
            format!("p{id}")
        } else {
            id.to_string()
        };
        out.insert(code, gender);
    }
    Ok(out)
}

fn audio_dir(root: &Path) -> PathBuf {
    ["wav48_silence_trimmed", "wav48", "wav"]
        .iter()
        .map(|d| root.join(d))
        .find(|p| p.is_dir())
        .unwrap_or_else(|| root.to_path_buf())
}

fn is_audio(path: &Path) -> bool {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let second_mic = path
        .file_stem()
        .and_then(|s| s.to_str())
        .is_some_and(|s| s.ends_with("_mic2"));
    matches!(ext.as_deref(), Some("wav" | "flac")) && !second_mic
}

/// `(samples, sample_rate)` from the file header only.
fn probe_audio(path: &Path) -> Option<(usize, u32)> {
    let is_flac = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("flac"));
    if is_flac {
        let r = claxon::FlacReader::open(path).ok()?;
        let info = r.streaminfo();
        Some((info.samples? as usize, info.sample_rate))
    } else {
        let r = hound::WavReader::open(path).ok()?;
        Some((r.duration() as usize, r.spec().sample_rate))
    }
}

fn scan_speaker(dir: &Path, code: &str, gender: Gender, opts: &ManifestOptions) -> Result<CorpusSpeaker> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_audio(p))
        .collect();
    files.sort();
    let mut speaker = CorpusSpeaker {
        code: code.to_string(),
        gender,
        utterances: Vec::new(),
        unreadable: 0,
        short: 0,
    };
    for f in files {
        match probe_audio(&f) {
            None | Some((0, _)) => {
                warn!("skipping unreadable audio file {}", f.display());
                speaker.unreadable += 1;
            }
            Some((len, rate)) => {
                let frames = opts
                    .stft
                    .frame_count(resampled_len(len, rate, opts.stft.sample_rate));
                if frames < opts.min_frames {
                    speaker.short += 1;
                } else {
                    speaker.utterances.push(f);
                }
            }
        }
    }
    Ok(speaker)
}

/// Selects `per_gender` speakers of each gender and splits each speaker's
/// utterances into train/test. Deterministic in `(corpus, opts)`.
pub fn build_manifest(corpus_root: &Path, opts: &ManifestOptions) -> Result<ManifestReport> {
    if !(0.0..=1.0).contains(&opts.train_fraction) {
        return Err(Error::Config("train_fraction must be within [0, 1]".into()));
    }
    let info = read_speaker_info(corpus_root)?;
    let audio_root = audio_dir(corpus_root);

    let mut eligible: BTreeMap<Gender, Vec<String>> = BTreeMap::new();
    for (code, gender) in &info {
        if audio_root.join(code).is_dir() {
            eligible.entry(*gender).or_default().push(code.clone());
        }
    }

    let mut chosen: Vec<(String, Gender)> = Vec::new();
    for gender in [Gender::Female, Gender::Male] {
        let mut codes = eligible.remove(&gender).unwrap_or_default();
        if codes.len() < opts.per_gender {
            return Err(Error::Config(format!(
                "need {} {} speakers, corpus has {}",
                opts.per_gender,
                if gender == Gender::Female { "female" } else { "male" },
                codes.len()
            )));
        }
        codes.sort();
        codes.shuffle(&mut stream(opts.seed, "subset", gender as u64));
        chosen.extend(codes.into_iter().take(opts.per_gender).map(|c| (c, gender)));
    }
    chosen.sort();

    let speakers: Vec<SpeakerId> = chosen
        .iter()
        .enumerate()
        .map(|(index, (code, gender))| SpeakerId {
            index,
            code: code.clone(),
            gender: *gender,
        })
        .collect();

    let mut records = Vec::new();
    let (mut unreadable, mut short) = (0, 0);
    for sp in &speakers {
        let scanned = scan_speaker(&audio_root.join(&sp.code), &sp.code, sp.gender, opts)?;
        unreadable += scanned.unreadable;
        short += scanned.short;
        let mut utts = scanned.utterances;
        utts.shuffle(&mut stream(opts.seed, &format!("split/{}", scanned.code), 0));
        let n = utts.len();
        let n_train = if n >= 2 {
            ((n as f64 * opts.train_fraction).round() as usize).clamp(1, n - 1)
        } else {
            n
        };
        let mut train: Vec<PathBuf> = utts[..n_train].to_vec();
        let mut test: Vec<PathBuf> = utts[n_train..].to_vec();
        train.sort();
        test.sort();
        for (paths, split) in [(train, Split::Train), (test, Split::Test)] {
            records.extend(paths.into_iter().map(|path| UtteranceRecord {
                speaker: sp.code.clone(),
                index: sp.index,
                gender: scanned.gender,
                path,
                split,
            }));
        }
    }
    if unreadable > 0 {
        info!("excluded {unreadable} unreadable files");
    }
    Ok(ManifestReport {
        manifest: Manifest { speakers, records },
        skipped_unreadable: unreadable,
        excluded_short: short,
    })
}

impl Manifest {
    /// Rebuilds the speaker table from records, checking the index ↔ code bijection.
    pub fn from_records(records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut by_index: BTreeMap<usize, SpeakerId> = BTreeMap::new();
        let mut codes: BTreeSet<String> = BTreeSet::new();
        for r in &records {
            let id = r.speaker_id();
            match by_index.get(&r.index) {
                Some(existing) if *existing != id => {
                    return Err(Error::Validation(format!(
                        "speaker index {} maps to both {} and {}",
                        r.index, existing.code, r.speaker
                    )))
                }
                Some(_) => {}
                None => {
                    if !codes.insert(r.speaker.clone()) {
                        return Err(Error::Validation(format!(
                            "speaker {} has more than one index",
                            r.speaker
                        )));
                    }
                    by_index.insert(r.index, id);
                }
            }
        }
        let speakers: Vec<SpeakerId> = by_index.into_values().collect();
        if speakers.iter().enumerate().any(|(i, s)| s.index != i) {
            return Err(Error::Validation("speaker indices are not contiguous".into()));
        }
        Ok(Manifest { speakers, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Manifest::from_records(records)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn speaker(&self, code: &str) -> Result<&SpeakerId> {
        self.speakers
            .iter()
            .find(|s| s.code == code)
            .ok_or_else(|| Error::Lookup(format!("unknown speaker {code}")))
    }
}

/// A spectrogram held in memory with its speaker.
#[derive(Clone, Debug)]
pub struct FeatureEntry {
    pub speaker: SpeakerId,
    pub spectrogram: Spectrogram,
}

/// Normalized training features plus the statistics used to produce them.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    pub speakers: Vec<SpeakerId>,
    pub entries: Vec<FeatureEntry>,
    pub stats: NormStats,
}

impl FeatureStore {
    /// Loads and normalizes every training utterance of `manifest`.
    pub fn from_manifest(manifest: &Manifest, stft: &StftConfig) -> Result<Self> {
        let mut raw = Vec::new();
        for r in manifest.split(Split::Train) {
            let w = load_waveform(&r.path, stft.sample_rate)?;
            raw.push(FeatureEntry {
                speaker: r.speaker_id(),
                spectrogram: compute_spectrogram(&w, stft)?,
            });
        }
        Self::from_spectrograms(manifest.speakers.clone(), raw)
    }

    /// Fits per-speaker statistics on `raw` and normalizes it.
    pub fn from_spectrograms(speakers: Vec<SpeakerId>, raw: Vec<FeatureEntry>) -> Result<Self> {
        let stats = NormStats::fit(
            raw.iter()
                .map(|e| (e.speaker.code.as_str(), &e.spectrogram)),
        )?;
        let entries = raw
            .into_iter()
            .map(|e| {
                let st = stats.for_speaker(Some(&e.speaker.code))?;
                Ok(FeatureEntry {
                    spectrogram: st.normalize(&e.spectrogram),
                    speaker: e.speaker,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FeatureStore {
            speakers,
            entries,
            stats,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Reconstruction,
    Classifier,
    Stepback,
    Gan,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Reconstruction => "reconstruction",
            Stage::Classifier => "classifier",
            Stage::Stepback => "stepback",
            Stage::Gan => "gan",
        }
    }
}

/// Fixed-length segments with aligned speaker labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub segments: Vec<Spectrogram>,
    pub speaker_ids: Vec<SpeakerId>,
    /// A different speaker per segment; only filled for the stepback stage.
    pub other_speaker_ids: Option<Vec<SpeakerId>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// `[batch, bins, frames]`, the layout the networks consume.
    pub fn to_array(&self) -> Array3<f64> {
        stack_spectrograms(&self.segments)
    }

    pub fn speaker_indices(&self) -> Vec<usize> {
        self.speaker_ids.iter().map(|s| s.index).collect()
    }

    pub fn other_indices(&self) -> Option<Vec<usize>> {
        self.other_speaker_ids
            .as_ref()
            .map(|v| v.iter().map(|s| s.index).collect())
    }
}

/// Stacks equally sized spectrograms into `[batch, bins, frames]`.
pub fn stack_spectrograms(specs: &[Spectrogram]) -> Array3<f64> {
    let (t, f) = specs
        .first()
        .map(|s| (s.n_frames(), s.n_bins()))
        .unwrap_or((0, 0));
    let mut out = Array3::zeros((specs.len(), f, t));
    for (b, s) in specs.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), b)
            .assign(&s.values.t());
    }
    out
}

/// Draws training batches from a [`FeatureStore`].
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    store: &'a FeatureStore,
    usable: Vec<usize>,
    pub batch_size: usize,
    pub segment_frames: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(store: &'a FeatureStore, batch_size: usize, segment_frames: usize) -> Result<Self> {
        if store.entries.is_empty() {
            return Err(Error::Data("no training utterances".into()));
        }
        let usable: Vec<usize> = store
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.spectrogram.n_frames() >= segment_frames)
            .map(|(i, _)| i)
            .collect();
        if usable.is_empty() {
            return Err(Error::Data(format!(
                "every training utterance is shorter than {segment_frames} frames"
            )));
        }
        Ok(BatchSampler {
            store,
            usable,
            batch_size,
            segment_frames,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.store.speakers.len()
    }

    pub fn next_batch<R: Rng + ?Sized>(&self, stage: Stage, rng: &mut R) -> Result<Batch> {
        let mut segments = Vec::with_capacity(self.batch_size);
        let mut speaker_ids = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let e = &self.store.entries[self.usable[rng.random_range(0..self.usable.len())]];
            segments.push(sample_segment(&e.spectrogram, self.segment_frames, rng)?);
            speaker_ids.push(e.speaker.clone());
        }
        let other_speaker_ids = match stage {
            Stage::Stepback => Some(
                speaker_ids
                    .iter()
                    .map(|s| self.other_speaker(s, rng))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        Ok(Batch {
            segments,
            speaker_ids,
            other_speaker_ids,
        })
    }

    /// Uniform over every speaker except `not`.
    pub fn other_speaker<R: Rng + ?Sized>(&self, not: &SpeakerId, rng: &mut R) -> Result<SpeakerId> {
        let n = self.store.speakers.len();
        if n < 2 {
            return Err(Error::Data(
                "a different speaker is needed but the run has only one".into(),
            ));
        }
        let mut k = rng.random_range(0..n - 1);
        if k >= not.index {
            k += 1;
        }
        Ok(self.store.speakers[k].clone())
    }

    /// Uniform over all speakers.
    pub fn any_speaker<R: Rng + ?Sized>(&self, rng: &mut R) -> SpeakerId {
        let n = self.store.speakers.len();
        self.store.speakers[rng.random_range(0..n)].clone()
    }
}

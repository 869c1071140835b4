//! Objective and subjective evaluation.
//!
//! Objective: per-bin global variance of converted spectrograms, grouped by
//! gender pairing, and spectrogram heatmaps. Subjective: blinded A/B
//! listening sessions, an append-only response store, unblinded aggregation
//! and the HTTP API the listening UI talks to.

pub mod api;
mod heatmap;
mod sessions;

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use heatmap::{colormap, heatmap_image, render_heatmap};
pub use sessions::{
    aggregate_results, binomial_two_sided_p, build_ab_sessions, AggregateTable, AudioTokens,
    BlindingKey, Choice, ChoiceRequest, EvalSession, Part, PartSummary, ResponseRecord,
    ResponseStore, SampleManifest, SampleSection, SectionKey, SectionView, SessionSet,
};

use crate::dataset::Gender;
use crate::error::{Error, Result};
use crate::features::{compute_spectrogram, load_waveform, Spectrogram, StftConfig};

/// Source and target gender of a conversion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConversionKind {
    M2M,
    M2F,
    F2M,
    F2F,
}

impl ConversionKind {
    pub const ALL: [ConversionKind; 4] = [Self::M2M, Self::M2F, Self::F2M, Self::F2F];

    pub fn from_genders(source: Gender, target: Gender) -> Self {
        match (source, target) {
            (Gender::Male, Gender::Male) => Self::M2M,
            (Gender::Male, Gender::Female) => Self::M2F,
            (Gender::Female, Gender::Male) => Self::F2M,
            (Gender::Female, Gender::Female) => Self::F2F,
        }
    }
}

impl fmt::Display for ConversionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for ConversionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Validation(format!("unknown conversion kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalVarianceProfile {
    pub variances: Vec<f64>,
    pub conversion_kind: ConversionKind,
    pub n_utterances: usize,
}

impl GlobalVarianceProfile {
    /// `bin,variance` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin,variance\n");
        for (k, v) in self.variances.iter().enumerate() {
            out.push_str(&format!("{k},{v:e}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Population variance of every bin over all frames of all spectrograms,
/// computed in two passes.
pub fn global_variance(specs: &[Spectrogram], kind: ConversionKind) -> Result<GlobalVarianceProfile> {
    let first = specs
        .first()
        .ok_or_else(|| Error::Validation("global variance of an empty set".into()))?;
    let n_bins = first.n_bins();
    if specs.iter().any(|s| s.n_bins() != n_bins) {
        return Err(Error::Validation("spectrograms have different bin counts".into()));
    }
    let n: usize = specs.iter().map(|s| s.n_frames()).sum();
    if n == 0 {
        return Err(Error::Validation("global variance of zero frames".into()));
    }
    let mut mean = vec![0.0; n_bins];
    for s in specs {
        for row in s.values.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; n_bins];
    for s in specs {
        for row in s.values.rows() {
            for ((acc, m), v) in var.iter_mut().zip(&mean).zip(row) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    Ok(GlobalVarianceProfile {
        variances: var,
        conversion_kind: kind,
        n_utterances: specs.len(),
    })
}

/// One converted utterance in a global-variance listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertedSample {
    pub path: PathBuf,
    pub source_gender: Gender,
    pub target_gender: Gender,
}

impl ConvertedSample {
    pub fn kind(&self) -> ConversionKind {
        ConversionKind::from_genders(self.source_gender, self.target_gender)
    }
}

/// Reads a JSONL listing of converted utterances.
pub fn read_converted_samples(path: &Path) -> Result<Vec<ConvertedSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_converted_samples(path: &Path, samples: &[ConvertedSample]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in samples {
        writeln!(f, "{}", serde_json::to_string(s)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Global variance of the listed utterances of one conversion kind.
pub fn global_variance_of_files(
    samples: &[ConvertedSample],
    kind: ConversionKind,
    stft: &StftConfig,
) -> Result<GlobalVarianceProfile> {
    let specs = samples
        .iter()
        .filter(|s| s.kind() == kind)
        .map(|s| compute_spectrogram(&load_waveform(&s.path, stft.sample_rate)?, stft))
        .collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(Error::Validation(format!("no {kind} utterances listed")));
    }
    global_variance(&specs, kind)
}

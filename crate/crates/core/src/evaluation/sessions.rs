//! Blinded A/B listening sessions.
//!
//! Each section compares two systems on one conversion and asks three
//! questions: which sample sounds more natural, which better preserves the
//! content of the source, and which sounds more like the target speaker.
//! Which system plays as "A" is decided per section by a seeded coin flip.
//! Clients only ever see [`EvalSession`]s with opaque audio tokens; the
//! [`BlindingKey`] mapping A/B back to systems and tokens back to files stays
//! on the server.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Naturalness,
    Content,
    Similarity,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Naturalness, Part::Content, Part::Similarity];

    pub fn prompt(self) -> &'static str {
        match self {
            Part::Naturalness => "Which sample sounds more natural in pitch, tone and stress?",
            Part::Content => "Which sample better preserves the linguistic content of the source?",
            Part::Similarity => "Which sample sounds more like the target speaker?",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| serde_json::to_value(p).ok().and_then(|v| v.as_str().map(|v| v == s)) == Some(true))
            .ok_or_else(|| Error::Validation(format!("unknown part {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Choice::A),
            "B" => Ok(Choice::B),
            other => Err(Error::Validation(format!("choice must be A or B, got {other:?}"))),
        }
    }
}

/// One comparison in the sample manifest: the two systems' renditions of the
/// same conversion plus the source and target references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSection {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Exactly two entries, system name to converted file.
    pub systems: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub sections: Vec<SampleSection>,
}

impl SampleManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioTokens {
    pub a: String,
    pub b: String,
    pub source: String,
    pub target: String,
}

/// What a client sees of one section.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionView {
    pub index: usize,
    pub parts: Vec<Part>,
    pub audio: AudioTokens,
}

/// Blinded session; safe to send to clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSession {
    pub session_id: String,
    pub sections: Vec<SectionView>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionKey {
    pub a_system: String,
    pub b_system: String,
}

/// Server-side unblinding information.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindingKey {
    pub seed: u64,
    /// Per session, per section.
    pub sections: BTreeMap<String, Vec<SectionKey>>,
    pub audio: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSet {
    pub sessions: Vec<EvalSession>,
    pub key: BlindingKey,
}

impl SessionSet {
    pub fn session(&self, id: &str) -> Result<&EvalSession> {
        self.sessions
            .iter()
            .find(|s| s.session_id == id)
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    pub fn section_key(&self, session: &str, section: usize) -> Result<&SectionKey> {
        self.key
            .sections
            .get(session)
            .and_then(|v| v.get(section))
            .ok_or_else(|| Error::NotFound(format!("section {section} of session {session}")))
    }

    pub fn audio_path(&self, token: &str) -> Result<&Path> {
        self.key
            .audio
            .get(token)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::NotFound("audio token".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn token(seed: u64, session: &str, role: &str) -> String {
    let digest = Sha256::digest(format!("stepback-audio/{seed}/{session}/{role}").as_bytes());
    hex::encode(&digest[..16])
}

/// One single-section session per manifest section; `n_sections` sections
/// must be present and complete.
pub fn build_ab_sessions(manifest: &SampleManifest, n_sections: usize, seed: u64) -> Result<SessionSet> {
    if n_sections == 0 {
        return Err(Error::Validation("at least one section is needed".into()));
    }
    if manifest.sections.len() < n_sections {
        return Err(Error::Validation(format!(
            "{} sections requested, manifest has {}",
            n_sections,
            manifest.sections.len()
        )));
    }
    let width = n_sections.to_string().len().max(2);
    let mut sessions = Vec::with_capacity(n_sections);
    let mut key = BlindingKey {
        seed,
        sections: BTreeMap::new(),
        audio: BTreeMap::new(),
    };
    for (i, sec) in manifest.sections.iter().take(n_sections).enumerate() {
        if sec.systems.len() != 2 {
            return Err(Error::Validation(format!(
                "section {i} lists {} systems, exactly 2 are needed",
                sec.systems.len()
            )));
        }
        let files: Vec<&PathBuf> = [&sec.source, &sec.target]
            .into_iter()
            .chain(sec.systems.values())
            .collect();
        if let Some(missing) = files.iter().find(|p| !p.is_file()) {
            return Err(Error::Validation(format!(
                "section {i} sample {} does not exist",
                missing.display()
            )));
        }
        let names: Vec<&String> = sec.systems.keys().collect();
        let first_is_a = stream(seed, "blinding", i as u64).random_bool(0.5);
        let (a, b) = if first_is_a {
            (names[0], names[1])
        } else {
            (names[1], names[0])
        };
        let session_id = format!("s{:0width$}", i + 1);
        let audio = AudioTokens {
            a: token(seed, &session_id, "a"),
            b: token(seed, &session_id, "b"),
            source: token(seed, &session_id, "source"),
            target: token(seed, &session_id, "target"),
        };
        key.audio.insert(audio.a.clone(), sec.systems[a].clone());
        key.audio.insert(audio.b.clone(), sec.systems[b].clone());
        key.audio.insert(audio.source.clone(), sec.source.clone());
        key.audio.insert(audio.target.clone(), sec.target.clone());
        key.sections.insert(
            session_id.clone(),
            vec![SectionKey {
                a_system: a.clone(),
                b_system: b.clone(),
            }],
        );
        sessions.push(EvalSession {
            session_id,
            sections: vec![SectionView {
                index: 0,
                parts: Part::ALL.to_vec(),
                audio,
            }],
        });
    }
    Ok(SessionSet { sessions, key })
}

/// A submission as it arrives from a client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceRequest {
    pub session_id: String,
    pub section: usize,
    pub part: String,
    pub choice: String,
    pub subject_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub session_id: String,
    pub section: usize,
    pub part: Part,
    pub choice: Choice,
    pub subject_id: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

impl ResponseRecord {
    fn key(&self) -> (String, usize, Part, String) {
        (
            self.session_id.clone(),
            self.section,
            self.part,
            self.subject_id.clone(),
        )
    }
}

struct StoreInner {
    file: File,
    seen: HashSet<(String, usize, Part, String)>,
    records: Vec<ResponseRecord>,
}

/// Append-only JSONL response log. Writes are serialized; each accepted
/// record is flushed and synced before it is acknowledged.
pub struct ResponseStore {
    path: PathBuf,
    inner: Mutex<StoreInner>,
}

impl ResponseStore {
    /// Opens (or creates) the log and replays existing records.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if !line.trim().is_empty() {
                    records.push(serde_json::from_str::<ResponseRecord>(&line)?);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let seen = records.iter().map(ResponseRecord::key).collect();
        Ok(ResponseStore {
            path: path.to_path_buf(),
            inner: Mutex::new(StoreInner { file, seen, records }),
        })
    }

    /// Validates and persists one choice.
    pub fn record_choice(&self, sessions: &SessionSet, req: &ChoiceRequest) -> Result<ResponseRecord> {
        let session = sessions.session(&req.session_id)?;
        if req.section >= session.sections.len() {
            return Err(Error::NotFound(format!(
                "section {} of session {}",
                req.section, req.session_id
            )));
        }
        let part = Part::parse(&req.part)?;
        let choice = Choice::parse(&req.choice)?;
        if req.subject_id.trim().is_empty() {
            return Err(Error::Validation("subject_id is empty".into()));
        }
        let record = ResponseRecord {
            session_id: req.session_id.clone(),
            section: req.section,
            part,
            choice,
            subject_id: req.subject_id.clone(),
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if inner.seen.contains(&record.key()) {
            return Err(Error::Conflict(format!(
                "subject {} already answered {:?} of section {} in session {}",
                record.subject_id, part, record.section, record.session_id
            )));
        }
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        let path = &self.path;
        inner
            .file
            .write_all(&line)
            .and_then(|_| inner.file.sync_data())
            .map_err(|e| Error::io(path, e))?;
        inner.seen.insert(record.key());
        inner.records.push(record.clone());
        Ok(record)
    }

    pub fn records(&self) -> Vec<ResponseRecord> {
        self.inner
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .records
            .clone()
    }

    /// Parts of `session` the subject has already answered, per section.
    pub fn answered(&self, session: &str, subject: &str) -> HashSet<(usize, Part)> {
        self.inner
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .records
            .iter()
            .filter(|r| r.session_id == session && r.subject_id == subject)
            .map(|r| (r.section, r.part))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSummary {
    pub part: Part,
    pub total: u64,
    /// Preferences per system after unblinding.
    pub counts: BTreeMap<String, u64>,
    pub proportions: BTreeMap<String, f64>,
    /// Two-sided exact binomial test against 0.5.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub parts: Vec<PartSummary>,
}

impl AggregateTable {
    pub fn part(&self, part: Part) -> &PartSummary {
        self.parts.iter().find(|p| p.part == part).expect("all parts present")
    }
}

/// `min(1, 2·min(P(X ≤ k), P(X ≥ k)))` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_two_sided_p(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let d = Binomial::new(0.5, n).expect("valid binomial");
    let lower = d.cdf(k);
    let upper = if k == 0 { 1.0 } else { d.sf(k - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

/// Unblinds every response and tabulates preferences per part.
pub fn aggregate_results(sessions: &SessionSet, responses: &[ResponseRecord]) -> Result<AggregateTable> {
    if responses.is_empty() {
        return Err(Error::Validation("no responses recorded".into()));
    }
    let mut systems: Vec<String> = sessions
        .key
        .sections
        .values()
        .flatten()
        .flat_map(|k| [k.a_system.clone(), k.b_system.clone()])
        .collect();
    systems.sort();
    systems.dedup();

    let mut counts: BTreeMap<Part, BTreeMap<String, u64>> = Part::ALL
        .iter()
        .map(|p| (*p, systems.iter().map(|s| (s.clone(), 0)).collect()))
        .collect();
    for r in responses {
        let k = sessions.section_key(&r.session_id, r.section)?;
        let system = match r.choice {
            Choice::A => &k.a_system,
            Choice::B => &k.b_system,
        };
        *counts
            .get_mut(&r.part)
            .expect("all parts present")
            .entry(system.clone())
            .or_insert(0) += 1;
    }
    let parts = counts
        .into_iter()
        .map(|(part, counts)| {
            let total: u64 = counts.values().sum();
            let proportions = if total == 0 {
                BTreeMap::new()
            } else {
                counts
                    .iter()
                    .map(|(s, c)| (s.clone(), *c as f64 / total as f64))
                    .collect()
            };
            let first = counts.values().next().copied().unwrap_or(0);
            PartSummary {
                part,
                total,
                p_value: binomial_two_sided_p(first, total),
                counts,
                proportions,
            }
        })
        .collect();
    Ok(AggregateTable { parts })
}

//! Core value types: embedding sets, utterance manifests, trial lists, score sets.
//!
//! Embeddings are held as `f64` in memory regardless of on-disk precision.
//! Every container keeps insertion order; nothing here iterates a hash map
//! to produce output.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub mod io;

/// One utterance- or speaker-level embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Embedding {
            id: id.into(),
            vector,
        }
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Ordered collection of embeddings sharing one dimension, with unique ids.
///
/// `dim() == 0` only while the set is empty; the first push fixes the
/// dimension. All vectors are finite: pushes reject NaN and infinity.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSet {
    dim: usize,
    entries: Vec<Embedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new() -> Self {
        EmbeddingSet::default()
    }

    pub fn with_dim(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dimension 0".into()));
        }
        Ok(EmbeddingSet {
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn from_entries(entries: Vec<Embedding>) -> Result<Self> {
        let mut set = EmbeddingSet::new();
        for e in entries {
            set.push(e)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, e: Embedding) -> Result<()> {
        if e.vector.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "embedding '{}' has dimension 0",
                e.id
            )));
        }
        if self.dim == 0 {
            self.dim = e.vector.len();
        } else if e.vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                id: e.id,
                expected: self.dim,
                got: e.vector.len(),
            });
        }
        if e.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding '{}'", e.id),
            });
        }
        if self.index.contains_key(&e.id) {
            return Err(Error::DuplicateId { id: e.id });
        }
        self.index.insert(e.id.clone(), self.entries.len());
        self.entries.push(e);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 0 while the set is empty.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Embedding> {
        self.entries.iter()
    }
}

/// Length-normalizes every vector in place order. Zero-norm vectors are an
/// error, not a silent pass-through.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut out = EmbeddingSet::new();
    for e in set.iter() {
        out.push(Embedding::new(e.id.clone(), l2_normalize_vec(&e.id, &e.vector)?))?;
    }
    Ok(out)
}

pub(crate) fn l2_normalize_vec(id: &str, v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm { id: id.into() });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Augmentation provenance tag on a manifest record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AugTag {
    Noise,
    Rir,
    Tempo,
    Volume,
}

impl fmt::Display for AugTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AugTag::Noise => "noise",
            AugTag::Rir => "rir",
            AugTag::Tempo => "tempo",
            AugTag::Volume => "volume",
        };
        f.write_str(s)
    }
}

impl FromStr for AugTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "noise" => Ok(AugTag::Noise),
            "rir" => Ok(AugTag::Rir),
            "tempo" => Ok(AugTag::Tempo),
            "volume" => Ok(AugTag::Volume),
            other => Err(format!("unknown augmentation tag '{other}'")),
        }
    }
}

pub const TEMPO_FACTORS: [f64; 3] = [0.9, 1.0, 1.1];

fn valid_tempo(t: f64) -> bool {
    TEMPO_FACTORS.iter().any(|&f| (t - f).abs() < 1e-9)
}

/// One utterance row: identity, optional speaker label, duration in seconds,
/// tempo factor it was resampled with (1.0 for originals), augmentation tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker: Option<String>,
    pub duration: f64,
    pub tempo_factor: f64,
    pub tags: Vec<AugTag>,
}

impl ManifestRecord {
    pub fn new(id: impl Into<String>, speaker: Option<String>, duration: f64) -> Self {
        ManifestRecord {
            id: id.into(),
            speaker,
            duration,
            tempo_factor: 1.0,
            tags: Vec::new(),
        }
    }
}

/// Ordered utterance manifest with unique ids.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl Manifest {
    pub fn new() -> Self {
        Manifest::default()
    }

    pub fn from_records(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut m = Manifest::new();
        for r in records {
            m.push(r)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, r: ManifestRecord) -> Result<()> {
        if !(r.duration.is_finite() && r.duration > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "record '{}': duration must be finite and positive, got {}",
                r.id, r.duration
            )));
        }
        if !valid_tempo(r.tempo_factor) {
            return Err(Error::InvalidParameter(format!(
                "record '{}': tempo factor must be one of 0.9, 1.0, 1.1, got {}",
                r.id, r.tempo_factor
            )));
        }
        if self.index.contains_key(&r.id) {
            return Err(Error::DuplicateId { id: r.id });
        }
        let mut r = r;
        r.tags.sort();
        r.tags.dedup();
        self.index.insert(r.id.clone(), self.records.len());
        self.records.push(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ManifestRecord> {
        self.records.iter()
    }

    /// Distinct speaker labels in first-appearance order. Unlabeled records
    /// contribute nothing.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for r in &self.records {
            if let Some(s) = &r.speaker {
                if seen.insert(s.as_str(), ()).is_none() {
                    out.push(s.as_str());
                }
            }
        }
        out
    }

    pub fn speaker_count(&self) -> usize {
        self.speakers().len()
    }

    /// Copy with all speaker labels removed.
    pub fn strip_labels(&self) -> Manifest {
        let records = self
            .records
            .iter()
            .map(|r| ManifestRecord {
                speaker: None,
                ..r.clone()
            })
            .collect();
        Manifest::from_records(records).expect("stripping labels preserves validity")
    }
}

/// Tempo copies append `#sp<factor>` to both the utterance id and the
/// speaker label, so `a` at factor 0.9 becomes `a#sp0.9` spoken by
/// `spk#sp0.9`. Tempo-shifted speech is treated as a new speaker.
fn tempo_suffix(base: &str, factor: f64) -> String {
    format!("{base}#sp{factor}")
}

/// Expands a manifest of originals with tempo-perturbed copies, one per
/// factor. Counts multiply by `1 + factors.len()`: originals first, then one
/// block per factor in the given order. A copy's duration is
/// `original / factor` and its tags gain `tempo`.
pub fn augment_manifest(manifest: &Manifest, factors: &[f64]) -> Result<Manifest> {
    for &f in factors {
        let ok = (f - 0.9).abs() < 1e-9 || (f - 1.1).abs() < 1e-9;
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "tempo factor {f} not allowed; use 0.9 and/or 1.1"
            )));
        }
    }
    for (i, &f) in factors.iter().enumerate() {
        if factors[..i].iter().any(|&g| (f - g).abs() < 1e-9) {
            return Err(Error::InvalidParameter(format!(
                "tempo factor {f} listed twice"
            )));
        }
    }
    for r in manifest.iter() {
        if (r.tempo_factor - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "record '{}' already tempo-perturbed (factor {}); augment originals only",
                r.id, r.tempo_factor
            )));
        }
    }

    let mut out = Manifest::new();
    for r in manifest.iter() {
        out.push(r.clone())?;
    }
    for &f in factors {
        for r in manifest.iter() {
            let mut tags = r.tags.clone();
            tags.push(AugTag::Tempo);
            out.push(ManifestRecord {
                id: tempo_suffix(&r.id, f),
                speaker: r.speaker.as_deref().map(|s| tempo_suffix(s, f)),
                duration: r.duration / f,
                tempo_factor: f,
                tags,
            })?;
        }
    }
    Ok(out)
}

/// Closed-form record and speaker counts after tempo augmentation.
pub fn augmented_counts(utterances: u64, speakers: u64, factor_count: u64) -> (u64, u64) {
    let mult = 1 + factor_count;
    (utterances * mult, speakers * mult)
}

/// Keeps records with `duration > min_duration`, strictly. A record lasting
/// exactly `min_duration` is dropped.
pub fn filter_short(manifest: &Manifest, min_duration: f64) -> Result<Manifest> {
    if !min_duration.is_finite() || min_duration < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "min duration must be finite and non-negative, got {min_duration}"
        )));
    }
    let records = manifest
        .iter()
        .filter(|r| r.duration > min_duration)
        .cloned()
        .collect();
    Manifest::from_records(records)
}

/// Caps every duration at `cap` seconds: `d -> min(d, cap)`.
pub fn truncate_durations(manifest: &Manifest, cap: f64) -> Result<Manifest> {
    if !cap.is_finite() || cap <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "duration cap must be finite and positive, got {cap}"
        )));
    }
    let records = manifest
        .iter()
        .map(|r| ManifestRecord {
            duration: r.duration.min(cap),
            ..r.clone()
        })
        .collect();
    Manifest::from_records(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrialLabel::Target => "1",
            TrialLabel::Nontarget => "0",
            TrialLabel::Unknown => "-",
        };
        f.write_str(s)
    }
}

impl FromStr for TrialLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(TrialLabel::Target),
            "0" => Ok(TrialLabel::Nontarget),
            "-" => Ok(TrialLabel::Unknown),
            other => Err(format!("unknown trial label '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub label: TrialLabel,
    pub enroll: String,
    pub test: String,
}

/// Ordered trial list. Pairs may repeat; order is meaningful and preserved.
#[derive(Debug, Clone, Default)]
pub struct TrialList {
    trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Self {
        TrialList { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trial> {
        self.trials.iter()
    }

    pub fn push(&mut self, t: Trial) {
        self.trials.push(t);
    }

    /// Distinct utterance ids over both trial sides, first-appearance order.
    pub fn utterance_ids(&self) -> Vec<&str> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for t in &self.trials {
            for id in [t.enroll.as_str(), t.test.as_str()] {
                if seen.insert(id, ()).is_none() {
                    out.push(id);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

/// Scores aligned to a trial list: same pairs, same order.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    entries: Vec<TrialScore>,
}

impl ScoreSet {
    pub fn new(entries: Vec<TrialScore>) -> Self {
        ScoreSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TrialScore] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TrialScore> {
        self.entries.iter()
    }

    pub fn push(&mut self, s: TrialScore) {
        self.entries.push(s);
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Distinct utterance ids over both sides, first-appearance order.
    pub fn utterance_ids(&self) -> Vec<&str> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for e in &self.entries {
            for id in [e.enroll.as_str(), e.test.as_str()] {
                if seen.insert(id, ()).is_none() {
                    out.push(id);
                }
            }
        }
        out
    }

    /// Checks this score set covers `trials` pair-for-pair in order.
    pub fn check_aligned(&self, trials: &TrialList) -> Result<()> {
        if self.len() != trials.len() {
            return Err(Error::Mismatch(format!(
                "{} scores vs {} trials",
                self.len(),
                trials.len()
            )));
        }
        for (i, (s, t)) in self.iter().zip(trials.iter()).enumerate() {
            if s.enroll != t.enroll || s.test != t.test {
                return Err(Error::Mismatch(format!(
                    "entry {i}: score pair ({}, {}) vs trial pair ({}, {})",
                    s.enroll, s.test, t.enroll, t.test
                )));
            }
        }
        Ok(())
    }
}

/// Scores of labeled trials as parallel (score, is_target) arrays, aligned by
/// position. Unknown-label trials are skipped.
pub fn labeled_scores(scores: &ScoreSet, trials: &TrialList) -> Result<(Vec<f64>, Vec<bool>)> {
    scores.check_aligned(trials)?;
    let mut s = Vec::new();
    let mut y = Vec::new();
    for (e, t) in scores.iter().zip(trials.iter()) {
        match t.label {
            TrialLabel::Target => {
                s.push(e.score);
                y.push(true);
            }
            TrialLabel::Nontarget => {
                s.push(e.score);
                y.push(false);
            }
            TrialLabel::Unknown => {}
        }
    }
    Ok((s, y))
}

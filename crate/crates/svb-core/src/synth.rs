//! Seeded synthetic corpora for pipeline exercises: Gaussian speaker
//! centroids on the unit sphere, per-utterance within-speaker spread, and an
//! additive domain-shift vector shared by every utterance.
//!
//! Generated feature values are rounded to the nearest f32 so they survive
//! the binary interchange format bit-for-bit; durations are rounded to the
//! 6-decimal grid the manifest format writes.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Embedding, EmbeddingSet, Manifest, ManifestRecord, Trial, TrialLabel, TrialList};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-utterance Gaussian around the speaker
    /// centroid.
    pub within_spread: f64,
    /// Length of the additive shift vector applied to every utterance.
    pub domain_shift: f64,
    /// Uniform duration range in seconds, inclusive bounds.
    pub duration_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            speakers: 20,
            utterances_per_speaker: 10,
            feature_dim: 64,
            within_spread: 0.15,
            domain_shift: 0.4,
            duration_range: (2.0, 15.0),
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(Error::InvalidParameter(
                "need at least 1 speaker and 1 utterance per speaker".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidParameter("feature dimension 0".into()));
        }
        if !(self.within_spread.is_finite() && self.within_spread >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "within_spread must be finite and non-negative, got {}",
                self.within_spread
            )));
        }
        if !(self.domain_shift.is_finite() && self.domain_shift >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "domain_shift must be finite and non-negative, got {}",
                self.domain_shift
            )));
        }
        let (lo, hi) = self.duration_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(Error::InvalidParameter(format!(
                "duration range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// Utterance feature vectors, `feature_dim`-dimensional.
    pub features: EmbeddingSet,
    /// Manifest with true speaker labels.
    pub truth: Manifest,
    /// The same manifest with labels stripped.
    pub unlabeled: Manifest,
}

fn unit_gaussian(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn quantize_duration(d: f64) -> f64 {
    format!("{d:.6}").parse().expect("formatted float parses")
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = seeding::rng(cfg.seed);
    let dim = cfg.feature_dim;

    let shift: Vec<f64> = if cfg.domain_shift > 0.0 {
        unit_gaussian(dim, &mut rng)
            .into_iter()
            .map(|x| x * cfg.domain_shift)
            .collect()
    } else {
        vec![0.0; dim]
    };

    let mut features = EmbeddingSet::new();
    let mut truth = Manifest::new();
    let (lo, hi) = cfg.duration_range;
    for s in 0..cfg.speakers {
        let speaker = format!("spk{s:04}");
        let centroid = unit_gaussian(dim, &mut rng);
        for u in 0..cfg.utterances_per_speaker {
            let id = format!("{speaker}_utt{u:03}");
            let mut v = Vec::with_capacity(dim);
            for i in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                let raw = centroid[i] + cfg.within_spread * noise + shift[i];
                v.push(raw as f32 as f64);
            }
            let duration = if lo == hi {
                lo
            } else {
                quantize_duration(rng.random_range(lo..hi))
            };
            features.push(Embedding::new(id.clone(), v))?;
            truth.push(ManifestRecord::new(id, Some(speaker.clone()), duration))?;
        }
    }
    let unlabeled = truth.strip_labels();
    Ok(SynthCorpus {
        features,
        truth,
        unlabeled,
    })
}

/// Seeded trial list over a labeled manifest: `n_target` same-speaker pairs
/// followed by `n_nontarget` cross-speaker pairs, without repeated pairs.
pub fn make_trials(
    truth: &Manifest,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    let mut by_speaker: Vec<(&str, Vec<&str>)> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for r in truth.iter() {
        let Some(spk) = r.speaker.as_deref() else {
            return Err(Error::InvalidParameter(format!(
                "record '{}' has no speaker label",
                r.id
            )));
        };
        let ix = *pos.entry(spk).or_insert_with(|| {
            by_speaker.push((spk, Vec::new()));
            by_speaker.len() - 1
        });
        by_speaker[ix].1.push(r.id.as_str());
    }

    let multi: Vec<usize> = (0..by_speaker.len())
        .filter(|&i| by_speaker[i].1.len() >= 2)
        .collect();
    if n_target > 0 && multi.is_empty() {
        return Err(Error::InvalidParameter(
            "target trials need a speaker with at least 2 utterances".into(),
        ));
    }
    if n_nontarget > 0 && by_speaker.len() < 2 {
        return Err(Error::InvalidParameter(
            "nontarget trials need at least 2 speakers".into(),
        ));
    }

    let mut rng = seeding::rng(seed);
    let mut seen: std::collections::HashSet<(String, String)> = std::collections::HashSet::new();
    let mut trials = TrialList::default();

    let push_unique = |trials: &mut TrialList,
                           seen: &mut std::collections::HashSet<(String, String)>,
                           label: TrialLabel,
                           enroll: &str,
                           test: &str|
     -> bool {
        let key = (enroll.to_string(), test.to_string());
        if seen.contains(&key) {
            return false;
        }
        seen.insert(key);
        trials.push(Trial {
            label,
            enroll: enroll.to_string(),
            test: test.to_string(),
        });
        true
    };

    let budget = 1000usize;
    let mut made = 0;
    let mut attempts = 0;
    while made < n_target {
        if attempts > budget * n_target.max(1) {
            return Err(Error::InvalidParameter(format!(
                "could not draw {n_target} distinct target pairs"
            )));
        }
        attempts += 1;
        let spk = multi[rng.random_range(0..multi.len())];
        let utts = &by_speaker[spk].1;
        let pick = rand::seq::index::sample(&mut rng, utts.len(), 2);
        if push_unique(
            &mut trials,
            &mut seen,
            TrialLabel::Target,
            utts[pick.index(0)],
            utts[pick.index(1)],
        ) {
            made += 1;
        }
    }

    made = 0;
    attempts = 0;
    while made < n_nontarget {
        if attempts > budget * n_nontarget.max(1) {
            return Err(Error::InvalidParameter(format!(
                "could not draw {n_nontarget} distinct nontarget pairs"
            )));
        }
        attempts += 1;
        let spks = rand::seq::index::sample(&mut rng, by_speaker.len(), 2);
        let (_, ea) = &by_speaker[spks.index(0)];
        let (_, eb) = &by_speaker[spks.index(1)];
        let a = ea[rng.random_range(0..ea.len())];
        let b = eb[rng.random_range(0..eb.len())];
        if push_unique(&mut trials, &mut seen, TrialLabel::Nontarget, a, b) {
            made += 1;
        }
    }

    Ok(trials)
}

//! Trial scoring, adaptive score normalization, and system fusion.

use rayon::prelude::*;

use crate::data::{l2_normalize_vec, Embedding, EmbeddingSet, Manifest, ScoreSet, TrialList, TrialScore};
use crate::error::{Error, Result};
use crate::seeding;

/// Cosine similarity, clamped to [-1, 1] against rounding overshoot.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Mismatch(format!(
            "cosine of {}-dim and {}-dim vectors",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm {
            id: "<cosine operand>".into(),
        });
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Scores every trial by cosine similarity of the referenced embeddings.
/// Output order matches trial order.
pub fn score_trials(set: &EmbeddingSet, trials: &TrialList) -> Result<ScoreSet> {
    let entries: Vec<Result<TrialScore>> = trials
        .trials()
        .par_iter()
        .map(|t| {
            let e = set.get(&t.enroll).ok_or_else(|| Error::UnknownId {
                id: t.enroll.clone(),
                context: "trial enrollment side".into(),
            })?;
            let x = set.get(&t.test).ok_or_else(|| Error::UnknownId {
                id: t.test.clone(),
                context: "trial test side".into(),
            })?;
            Ok(TrialScore {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score: cosine_score(&e.vector, &x.vector)?,
            })
        })
        .collect();
    let mut out = ScoreSet::default();
    for e in entries {
        out.push(e?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortSource {
    /// One vector per training speaker: mean of its normalized utterance
    /// embeddings, re-normalized.
    SpeakerMeans,
    /// Random sample of utterance embeddings, normalized.
    RandomUtterances,
    /// Vectors supplied as-is by the caller (normalized on construction).
    External,
}

/// Normalization cohort: at least two unit-norm vectors.
#[derive(Debug, Clone)]
pub struct Cohort {
    embeddings: EmbeddingSet,
    source: CohortSource,
}

impl Cohort {
    /// Normalizes the given vectors and checks the size floor.
    pub fn from_set(set: &EmbeddingSet, source: CohortSource) -> Result<Self> {
        if set.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "cohort needs at least 2 vectors, got {}",
                set.len()
            )));
        }
        Ok(Cohort {
            embeddings: crate::data::l2_normalize(set)?,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn source(&self) -> CohortSource {
        self.source
    }

    pub fn embeddings(&self) -> &EmbeddingSet {
        &self.embeddings
    }
}

/// One cohort vector per distinct labeled speaker in `manifest` order:
/// the re-normalized mean of the speaker's normalized utterance embeddings.
///
/// Every utterance in `set` must carry a speaker label in the manifest, and
/// every labeled speaker must have at least one utterance in `set`.
pub fn speaker_mean_cohort(set: &EmbeddingSet, manifest: &Manifest) -> Result<Cohort> {
    for e in set.iter() {
        match manifest.get(&e.id) {
            None => {
                return Err(Error::UnknownId {
                    id: e.id.clone(),
                    context: "cohort manifest".into(),
                })
            }
            Some(r) if r.speaker.is_none() => {
                return Err(Error::InvalidParameter(format!(
                    "utterance '{}' has no speaker label",
                    e.id
                )))
            }
            Some(_) => {}
        }
    }

    let speakers = manifest.speakers();
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; set.dim()]; speakers.len()];
    let mut counts: Vec<usize> = vec![0; speakers.len()];
    let mut speaker_pos = std::collections::HashMap::new();
    for (i, s) in speakers.iter().enumerate() {
        speaker_pos.insert(*s, i);
    }

    for e in set.iter() {
        let spk = manifest.get(&e.id).unwrap().speaker.as_deref().unwrap();
        let pos = speaker_pos[spk];
        let unit = l2_normalize_vec(&e.id, &e.vector)?;
        for (acc, v) in sums[pos].iter_mut().zip(&unit) {
            *acc += v;
        }
        counts[pos] += 1;
    }

    let mut means = EmbeddingSet::new();
    for (i, s) in speakers.iter().enumerate() {
        if counts[i] == 0 {
            return Err(Error::InvalidParameter(format!(
                "speaker '{s}' has no utterances in the embedding set"
            )));
        }
        let mean: Vec<f64> = sums[i].iter().map(|v| v / counts[i] as f64).collect();
        means.push(Embedding::new(s.to_string(), mean))?;
    }
    Cohort::from_set(&means, CohortSource::SpeakerMeans)
}

/// Samples `size` distinct utterances without replacement, in id order of
/// the original set, and normalizes them.
pub fn random_cohort(set: &EmbeddingSet, size: usize, seed: u64) -> Result<Cohort> {
    if size < 2 {
        return Err(Error::InvalidParameter(format!(
            "cohort size {size} below the minimum of 2"
        )));
    }
    if size > set.len() {
        return Err(Error::InvalidParameter(format!(
            "cohort size {size} exceeds the {} available utterances",
            set.len()
        )));
    }
    let mut rng = seeding::rng(seed);
    let mut picked = rand::seq::index::sample(&mut rng, set.len(), size).into_vec();
    picked.sort_unstable();
    let mut subset = EmbeddingSet::new();
    for i in picked {
        subset.push(set.entries()[i].clone())?;
    }
    Cohort::from_set(&subset, CohortSource::RandomUtterances)
}

#[derive(Debug, Clone, Copy)]
pub struct AsNormConfig {
    /// Cohort scores kept per side when computing the normalization stats.
    pub top_n: usize,
    /// Standard deviations below this are clamped up to it.
    pub sigma_floor: f64,
}

impl Default for AsNormConfig {
    fn default() -> Self {
        AsNormConfig {
            top_n: 400,
            sigma_floor: 1e-6,
        }
    }
}

struct SideStats {
    mean: f64,
    sigma: f64,
}

/// Top-N cohort statistics for one utterance: scores against every cohort
/// vector, the N best kept (ties broken toward the lower cohort index), then
/// mean and population standard deviation accumulated in cohort index order.
fn side_stats(vector: &[f64], cohort: &Cohort, cfg: &AsNormConfig) -> Result<SideStats> {
    let mut scores = Vec::with_capacity(cohort.len());
    for c in cohort.embeddings().iter() {
        scores.push(cosine_score(vector, &c.vector)?);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite cosine scores")
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = order[..cfg.top_n].to_vec();
    top.sort_unstable();

    let n = cfg.top_n as f64;
    let mut mean = 0.0;
    for &i in &top {
        mean += scores[i];
    }
    mean /= n;
    let mut var = 0.0;
    for &i in &top {
        let d = scores[i] - mean;
        var += d * d;
    }
    var /= n;
    let sigma = var.sqrt().max(cfg.sigma_floor);
    Ok(SideStats { mean, sigma })
}

/// Adaptive symmetric score normalization:
/// s' = ((s - mu_e) / sigma_e + (s - mu_t) / sigma_t) / 2
/// with per-side stats from the top-N cohort scores of that utterance.
pub fn as_norm(
    raw: &ScoreSet,
    set: &EmbeddingSet,
    cohort: &Cohort,
    cfg: &AsNormConfig,
) -> Result<ScoreSet> {
    if cfg.top_n < 2 {
        return Err(Error::InvalidParameter(format!(
            "top_n {} below the minimum of 2",
            cfg.top_n
        )));
    }
    if cfg.top_n > cohort.len() {
        return Err(Error::InvalidParameter(format!(
            "top_n {} exceeds cohort size {}",
            cfg.top_n,
            cohort.len()
        )));
    }
    if !(cfg.sigma_floor.is_finite() && cfg.sigma_floor > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma floor must be finite and positive, got {}",
            cfg.sigma_floor
        )));
    }

    let ids = raw.utterance_ids();
    let stats: Vec<Result<SideStats>> = ids
        .par_iter()
        .map(|id| {
            let e = set.get(id).ok_or_else(|| Error::UnknownId {
                id: (*id).into(),
                context: "score normalization".into(),
            })?;
            side_stats(&e.vector, cohort, cfg)
        })
        .collect();
    let mut by_id = std::collections::HashMap::new();
    for (id, s) in ids.iter().zip(stats) {
        by_id.insert(*id, s?);
    }

    let mut out = ScoreSet::default();
    for e in raw.iter() {
        let se = &by_id[e.enroll.as_str()];
        let st = &by_id[e.test.as_str()];
        let z = ((e.score - se.mean) / se.sigma + (e.score - st.mean) / st.sigma) / 2.0;
        out.push(TrialScore {
            enroll: e.enroll.clone(),
            test: e.test.clone(),
            score: z,
        });
    }
    Ok(out)
}

/// Weighted score-level fusion of aligned systems. With no weights, or with
/// all weights equal, each fused score is the plain arithmetic mean.
pub fn fuse(systems: &[&ScoreSet], weights: Option<&[f64]>) -> Result<ScoreSet> {
    if systems.is_empty() {
        return Err(Error::EmptyInput("no systems to fuse".into()));
    }
    let n = systems[0].len();
    for (k, s) in systems.iter().enumerate().skip(1) {
        if s.len() != n {
            return Err(Error::Mismatch(format!(
                "system 0 has {n} trials, system {k} has {}",
                s.len()
            )));
        }
        for i in 0..n {
            let a = &systems[0].entries()[i];
            let b = &s.entries()[i];
            if a.enroll != b.enroll || a.test != b.test {
                return Err(Error::Mismatch(format!(
                    "trial {i}: system 0 has ({}, {}), system {k} has ({}, {})",
                    a.enroll, a.test, b.enroll, b.test
                )));
            }
        }
    }

    let uniform = match weights {
        None => true,
        Some(w) => {
            if w.len() != systems.len() {
                return Err(Error::Mismatch(format!(
                    "{} weights vs {} systems",
                    w.len(),
                    systems.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "fusion weights".into(),
                });
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "fusion weights must sum to a positive value, got {total}"
                )));
            }
            w.iter().all(|&x| x == w[0])
        }
    };

    let mut out = ScoreSet::default();
    for i in 0..n {
        let base = &systems[0].entries()[i];
        // The mean of equal values is that value; taking the shortcut keeps
        // fusion of identical systems an exact identity.
        let all_same = systems.iter().all(|s| s.entries()[i].score == base.score);
        let score = if all_same {
            base.score
        } else if uniform {
            let mut sum = 0.0;
            for s in systems {
                sum += s.entries()[i].score;
            }
            sum / systems.len() as f64
        } else {
            let w = weights.unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for (k, s) in systems.iter().enumerate() {
                num += w[k] * s.entries()[i].score;
                den += w[k];
            }
            num / den
        };
        out.push(TrialScore {
            enroll: base.enroll.clone(),
            test: base.test.clone(),
            score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Trial, TrialLabel};

    fn set(entries: &[(&str, &[f64])]) -> EmbeddingSet {
        EmbeddingSet::from_entries(
            entries
                .iter()
                .map(|(id, v)| Embedding::new(*id, v.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine_score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_score(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), -1.0);
        assert!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-15);
        // Scale invariance.
        let a = [0.3, -0.2, 0.9];
        let b = [0.1, 0.4, -0.5];
        let scaled: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        assert!(
            (cosine_score(&a, &b).unwrap() - cosine_score(&scaled, &b).unwrap()).abs() < 1e-12
        );
        assert!(cosine_score(&[0.0], &[1.0]).is_err());
        assert!(cosine_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn score_trials_preserves_order_and_reports_unknown_ids() {
        let s = set(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0]), ("c", &[1.0, 1.0])]);
        let trials = TrialList::new(vec![
            Trial {
                label: TrialLabel::Unknown,
                enroll: "a".into(),
                test: "c".into(),
            },
            Trial {
                label: TrialLabel::Unknown,
                enroll: "a".into(),
                test: "b".into(),
            },
        ]);
        let scores = score_trials(&s, &trials).unwrap();
        assert_eq!(scores.entries()[0].enroll, "a");
        assert_eq!(scores.entries()[0].test, "c");
        assert!((scores.entries()[0].score - (0.5f64).sqrt()).abs() < 1e-12);
        assert_eq!(scores.entries()[1].score, 0.0);

        let missing = TrialList::new(vec![Trial {
            label: TrialLabel::Unknown,
            enroll: "a".into(),
            test: "zzz".into(),
        }]);
        assert!(matches!(
            score_trials(&s, &missing),
            Err(Error::UnknownId { .. })
        ));
    }

    #[test]
    fn speaker_means_average_normalized_vectors() {
        // Speaker s1 has two utterances pointing along x with different
        // magnitudes; the mean of their unit vectors is the x axis.
        let s = set(&[
            ("u1", &[2.0, 0.0]),
            ("u2", &[5.0, 0.0]),
            ("u3", &[0.0, 1.0]),
        ]);
        let m = crate::data::Manifest::from_records(vec![
            crate::data::ManifestRecord::new("u1", Some("s1".into()), 3.0),
            crate::data::ManifestRecord::new("u2", Some("s1".into()), 3.0),
            crate::data::ManifestRecord::new("u3", Some("s2".into()), 3.0),
        ])
        .unwrap();
        let cohort = speaker_mean_cohort(&s, &m).unwrap();
        assert_eq!(cohort.len(), 2);
        assert_eq!(cohort.source(), CohortSource::SpeakerMeans);
        let s1 = cohort.embeddings().get("s1").unwrap();
        assert!((s1.vector[0] - 1.0).abs() < 1e-12);
        assert!(s1.vector[1].abs() < 1e-12);
    }

    #[test]
    fn speaker_means_require_labels_and_coverage() {
        let s = set(&[("u1", &[1.0, 0.0])]);
        let unlabeled = crate::data::Manifest::from_records(vec![
            crate::data::ManifestRecord::new("u1", None, 3.0),
        ])
        .unwrap();
        assert!(speaker_mean_cohort(&s, &unlabeled).is_err());

        let extra_speaker = crate::data::Manifest::from_records(vec![
            crate::data::ManifestRecord::new("u1", Some("s1".into()), 3.0),
            crate::data::ManifestRecord::new("u9", Some("s2".into()), 3.0),
        ])
        .unwrap();
        assert!(speaker_mean_cohort(&s, &extra_speaker).is_err());
    }

    #[test]
    fn random_cohort_is_seeded_and_bounded() {
        let entries: Vec<(String, Vec<f64>)> = (0..20)
            .map(|i| (format!("u{i}"), vec![i as f64 + 1.0, 1.0]))
            .collect();
        let refs: Vec<(&str, &[f64])> = entries
            .iter()
            .map(|(id, v)| (id.as_str(), v.as_slice()))
            .collect();
        let s = set(&refs);
        let a = random_cohort(&s, 5, 7).unwrap();
        let b = random_cohort(&s, 5, 7).unwrap();
        let ids_a: Vec<&str> = a.embeddings().iter().map(|e| e.id.as_str()).collect();
        let ids_b: Vec<&str> = b.embeddings().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids_a, ids_b);
        let c = random_cohort(&s, 5, 8).unwrap();
        let ids_c: Vec<&str> = c.embeddings().iter().map(|e| e.id.as_str()).collect();
        assert_ne!(ids_a, ids_c);
        assert!(random_cohort(&s, 1, 7).is_err());
        assert!(random_cohort(&s, 21, 7).is_err());
    }

    #[test]
    fn as_norm_matches_hand_computed_stats() {
        // Enrollment e scores {0.0, 0.2} against the cohort, test t the
        // same, raw score 0.3. Top-2 stats: mean 0.1, sigma 0.1, so the
        // normalized score is 2.0 on both sides.
        let dim2 = |x: f64, y: f64| vec![x, y];
        let e = dim2(1.0, 0.0);
        let c1 = dim2(0.0, 1.0);
        let angle = 0.2f64.acos();
        let c2 = dim2(angle.cos(), angle.sin());

        let mut all = EmbeddingSet::new();
        all.push(Embedding::new("e", e.clone())).unwrap();
        all.push(Embedding::new("t", e.clone())).unwrap();
        let mut cohort_set = EmbeddingSet::new();
        cohort_set.push(Embedding::new("c1", c1)).unwrap();
        cohort_set.push(Embedding::new("c2", c2)).unwrap();
        let cohort = Cohort::from_set(&cohort_set, CohortSource::External).unwrap();

        let raw = ScoreSet::new(vec![TrialScore {
            enroll: "e".into(),
            test: "t".into(),
            score: 0.3,
        }]);
        let cfg = AsNormConfig {
            top_n: 2,
            sigma_floor: 1e-6,
        };
        let out = as_norm(&raw, &all, &cohort, &cfg).unwrap();
        assert!((out.entries()[0].score - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn as_norm_sigma_floor_blocks_division_blowup() {
        // Identical cohort vectors give sigma 0; the floor takes over.
        let s = set(&[("e", &[1.0, 0.0]), ("t", &[0.0, 1.0])]);
        let cohort_set = set(&[("c1", &[1.0, 1.0]), ("c2", &[2.0, 2.0])]);
        let cohort = Cohort::from_set(&cohort_set, CohortSource::External).unwrap();
        let raw = ScoreSet::new(vec![TrialScore {
            enroll: "e".into(),
            test: "t".into(),
            score: 0.5,
        }]);
        let cfg = AsNormConfig {
            top_n: 2,
            sigma_floor: 1e-6,
        };
        let out = as_norm(&raw, &s, &cohort, &cfg).unwrap();
        assert!(out.entries()[0].score.is_finite());
    }

    #[test]
    fn as_norm_validates_top_n() {
        let s = set(&[("e", &[1.0, 0.0]), ("t", &[0.0, 1.0])]);
        let cohort = Cohort::from_set(&set(&[("c1", &[1.0, 1.0]), ("c2", &[1.0, 0.5])]), CohortSource::External)
            .unwrap();
        let raw = ScoreSet::new(vec![TrialScore {
            enroll: "e".into(),
            test: "t".into(),
            score: 0.5,
        }]);
        for top_n in [1usize, 3] {
            let cfg = AsNormConfig {
                top_n,
                sigma_floor: 1e-6,
            };
            assert!(as_norm(&raw, &s, &cohort, &cfg).is_err());
        }
    }

    fn score_set(vals: &[f64]) -> ScoreSet {
        ScoreSet::new(
            vals.iter()
                .enumerate()
                .map(|(i, &v)| TrialScore {
                    enroll: format!("e{i}"),
                    test: format!("t{i}"),
                    score: v,
                })
                .collect(),
        )
    }

    #[test]
    fn fuse_mean_and_weighted() {
        let a = score_set(&[0.9, 0.1]);
        let b = score_set(&[0.3, 0.5]);
        let mean = fuse(&[&a, &b], None).unwrap();
        assert_eq!(mean.entries()[0].score, (0.9 + 0.3) / 2.0);
        assert_eq!(mean.entries()[1].score, (0.1 + 0.5) / 2.0);

        let equal = fuse(&[&a, &b], Some(&[2.5, 2.5])).unwrap();
        assert_eq!(equal.entries()[0].score, mean.entries()[0].score);

        let weighted = fuse(&[&a, &b], Some(&[2.0, 1.0])).unwrap();
        assert!((weighted.entries()[0].score - (2.0 * 0.9 + 0.3) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fuse_single_system_is_identity() {
        let a = score_set(&[0.9, 0.1, -0.4]);
        let out = fuse(&[&a], None).unwrap();
        for (x, y) in a.iter().zip(out.iter()) {
            assert_eq!(x.score, y.score);
        }
    }

    #[test]
    fn fuse_rejects_misalignment_and_bad_weights() {
        let a = score_set(&[0.9, 0.1]);
        let mut b = score_set(&[0.3, 0.5]);
        b = ScoreSet::new(vec![b.entries()[1].clone(), b.entries()[0].clone()]);
        assert!(fuse(&[&a, &b], None).is_err());

        let c = score_set(&[0.3, 0.5]);
        assert!(fuse(&[&a, &c], Some(&[1.0])).is_err());
        assert!(fuse(&[&a, &c], Some(&[1.0, -1.0])).is_err());
        assert!(fuse(&[&a, &c], Some(&[f64::NAN, 1.0])).is_err());
        assert!(fuse(&[], None).is_err());
    }
}

//! Semi-supervised domain adaptation: cluster an unlabeled in-domain pool
//! into pseudo-speakers, estimate a linear embedding transform from the
//! pseudo-labels, and iterate with the transformed extractor. Each round can
//! be scored on a validation trial list through the full cascade (raw
//! cosine, adaptive score normalization, quality-measure calibration).

use rayon::prelude::*;

use crate::calibration::{self, FitOptions};
use crate::clustering::{
    self, Clustering, ElbowResult, SseCurve, KMEANS_DEFAULT_MAX_ITERS, KMEANS_DEFAULT_RESTARTS,
};
use crate::data::{self, Embedding, EmbeddingSet, Manifest, TrialLabel, TrialList};
use crate::error::{Error, Result};
use crate::metrics::{self, DcfParams};
use crate::scoring::{self, AsNormConfig};
use crate::seeding;

/// Maps utterance ids to embeddings. Implementations must be safe to call
/// from multiple threads.
pub trait Extractor: Sync {
    fn dim(&self) -> usize;
    fn extract(&self, id: &str) -> Result<Vec<f64>>;
}

/// Serves embeddings from a preloaded set.
pub struct FileBackedExtractor {
    set: EmbeddingSet,
}

impl FileBackedExtractor {
    pub fn new(set: EmbeddingSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::EmptyInput("extractor backing set is empty".into()));
        }
        Ok(FileBackedExtractor { set })
    }
}

impl Extractor for FileBackedExtractor {
    fn dim(&self) -> usize {
        self.set.dim()
    }

    fn extract(&self, id: &str) -> Result<Vec<f64>> {
        self.set
            .get(id)
            .map(|e| e.vector.clone())
            .ok_or_else(|| Error::UnknownId {
                id: id.into(),
                context: "extractor backing set".into(),
            })
    }
}

/// Stand-in for a trained network: a seeded random linear projection from
/// feature space to embedding space. Outputs are rounded to the f32 grid so
/// they match the binary interchange format exactly.
pub struct SyntheticLinearExtractor {
    features: EmbeddingSet,
    matrix: Vec<f64>,
    out_dim: usize,
}

impl SyntheticLinearExtractor {
    pub fn new(features: EmbeddingSet, out_dim: usize, seed: u64) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyInput("extractor feature set is empty".into()));
        }
        if out_dim == 0 {
            return Err(Error::InvalidParameter("output dimension 0".into()));
        }
        let in_dim = features.dim();
        let mut rng = seeding::rng(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let matrix: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| {
                let g: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                g * scale
            })
            .collect();
        Ok(SyntheticLinearExtractor {
            features,
            matrix,
            out_dim,
        })
    }
}

impl Extractor for SyntheticLinearExtractor {
    fn dim(&self) -> usize {
        self.out_dim
    }

    fn extract(&self, id: &str) -> Result<Vec<f64>> {
        let e = self.features.get(id).ok_or_else(|| Error::UnknownId {
            id: id.into(),
            context: "extractor feature set".into(),
        })?;
        let in_dim = self.features.dim();
        let mut out = Vec::with_capacity(self.out_dim);
        for i in 0..self.out_dim {
            let row = &self.matrix[i * in_dim..(i + 1) * in_dim];
            let mut acc = 0.0;
            for (m, x) in row.iter().zip(&e.vector) {
                acc += m * x;
            }
            out.push(acc as f32 as f64);
        }
        Ok(out)
    }
}

/// Dense linear map, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransform {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
}

impl LinearTransform {
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter(
                "transform dimensions must be positive".into(),
            ));
        }
        if matrix.len() != rows * cols {
            return Err(Error::Mismatch(format!(
                "{} matrix entries for a {rows}x{cols} transform",
                matrix.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "transform matrix".into(),
            });
        }
        Ok(LinearTransform { rows, cols, matrix })
    }

    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        LinearTransform {
            rows: dim,
            cols: dim,
            matrix,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn is_identity(&self) -> bool {
        self.rows == self.cols
            && self
                .matrix
                .iter()
                .enumerate()
                .all(|(i, &v)| v == if i / self.cols == i % self.cols { 1.0 } else { 0.0 })
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Mismatch(format!(
                "vector of length {} into a {}x{} transform",
                v.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let row = &self.matrix[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (m, x) in row.iter().zip(v) {
                acc += m * x;
            }
            out.push(acc);
        }
        Ok(out)
    }
}

/// A base extractor with zero or more transforms applied in order.
pub struct ChainExtractor<'a> {
    base: &'a dyn Extractor,
    transforms: Vec<LinearTransform>,
}

impl<'a> ChainExtractor<'a> {
    pub fn new(base: &'a dyn Extractor) -> Self {
        ChainExtractor {
            base,
            transforms: Vec::new(),
        }
    }

    pub fn push(&mut self, t: LinearTransform) -> Result<()> {
        if t.cols() != self.dim() {
            return Err(Error::Mismatch(format!(
                "transform expects {} inputs, chain produces {}",
                t.cols(),
                self.dim()
            )));
        }
        self.transforms.push(t);
        Ok(())
    }

    pub fn transforms(&self) -> &[LinearTransform] {
        &self.transforms
    }
}

impl Extractor for ChainExtractor<'_> {
    fn dim(&self) -> usize {
        self.transforms
            .last()
            .map(|t| t.rows())
            .unwrap_or_else(|| self.base.dim())
    }

    fn extract(&self, id: &str) -> Result<Vec<f64>> {
        let mut v = self.base.extract(id)?;
        for t in &self.transforms {
            v = t.apply(&v)?;
        }
        Ok(v)
    }
}

/// Extracts every id, in the given order. Extraction runs in parallel; the
/// output order never depends on scheduling.
pub fn extract_all(extractor: &dyn Extractor, ids: &[&str]) -> Result<EmbeddingSet> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("no ids to extract".into()));
    }
    let vectors: Vec<Result<Vec<f64>>> = ids.par_iter().map(|id| extractor.extract(id)).collect();
    let mut set = EmbeddingSet::new();
    for (id, v) in ids.iter().zip(vectors) {
        set.push(Embedding::new(*id, v?))?;
    }
    Ok(set)
}

/// Estimates a linear embedding transform from labeled (or pseudo-labeled)
/// embeddings.
pub trait AdaptationOperator {
    fn name(&self) -> &'static str;
    fn estimate(&self, embeddings: &EmbeddingSet, labels: &Manifest) -> Result<LinearTransform>;
}

/// Leaves the embedding space untouched. Useful as a control: every round
/// then sees identical embeddings, so pseudo-labels repeat exactly.
pub struct IdentityOperator;

impl AdaptationOperator for IdentityOperator {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn estimate(&self, embeddings: &EmbeddingSet, _labels: &Manifest) -> Result<LinearTransform> {
        if embeddings.is_empty() {
            return Err(Error::EmptyInput("no embeddings to estimate from".into()));
        }
        Ok(LinearTransform::identity(embeddings.dim()))
    }
}

/// Symmetric whitening of the within-class covariance: with W the pooled
/// within-class scatter, the transform is (W + r*I)^(-1/2) where
/// r = ridge * trace(W) / dim. After the transform, within-class covariance
/// is close to identity, which suits cosine scoring across domains.
pub struct WithinClassWhitening {
    pub ridge: f64,
}

impl Default for WithinClassWhitening {
    fn default() -> Self {
        WithinClassWhitening { ridge: 1e-3 }
    }
}

impl AdaptationOperator for WithinClassWhitening {
    fn name(&self) -> &'static str {
        "within-class-whitening"
    }

    fn estimate(&self, embeddings: &EmbeddingSet, labels: &Manifest) -> Result<LinearTransform> {
        if !(self.ridge.is_finite() && self.ridge > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "whitening ridge must be finite and positive, got {}",
                self.ridge
            )));
        }
        if embeddings.is_empty() {
            return Err(Error::EmptyInput("no embeddings to estimate from".into()));
        }
        let dim = embeddings.dim();
        let n = embeddings.len() as f64;

        // Class index per sample, classes in first-appearance order.
        let mut class_of = Vec::with_capacity(embeddings.len());
        let mut classes: Vec<&str> = Vec::new();
        let mut class_pos: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        for e in embeddings.iter() {
            let rec = labels.get(&e.id).ok_or_else(|| Error::UnknownId {
                id: e.id.clone(),
                context: "whitening label manifest".into(),
            })?;
            let spk = rec.speaker.as_deref().ok_or_else(|| {
                Error::InvalidParameter(format!("record '{}' has no speaker label", e.id))
            })?;
            let ix = *class_pos.entry(spk).or_insert_with(|| {
                classes.push(spk);
                classes.len() - 1
            });
            class_of.push(ix);
        }

        let mut means = vec![vec![0.0; dim]; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for (e, &c) in embeddings.iter().zip(&class_of) {
            counts[c] += 1;
            for (m, x) in means[c].iter_mut().zip(&e.vector) {
                *m += x;
            }
        }
        for (mean, &cnt) in means.iter_mut().zip(&counts) {
            for m in mean.iter_mut() {
                *m /= cnt as f64;
            }
        }

        let mut w = vec![vec![0.0; dim]; dim];
        let mut diff = vec![0.0; dim];
        for (e, &c) in embeddings.iter().zip(&class_of) {
            for (d, (x, m)) in diff.iter_mut().zip(e.vector.iter().zip(&means[c])) {
                *d = x - m;
            }
            for i in 0..dim {
                let di = diff[i];
                for j in i..dim {
                    w[i][j] += di * diff[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                w[i][j] /= n;
                w[j][i] = w[i][j];
            }
        }

        let trace: f64 = (0..dim).map(|i| w[i][i]).sum();
        if trace <= 0.0 {
            // Every sample sits exactly on its class mean.
            return Ok(LinearTransform::identity(dim));
        }
        let r = self.ridge * trace / dim as f64;
        for (i, row) in w.iter_mut().enumerate() {
            row[i] += r;
        }

        let (eigvals, eigvecs) = jacobi_eigh(w);
        let inv_sqrt: Vec<f64> = eigvals.iter().map(|&l| 1.0 / l.max(1e-300).sqrt()).collect();
        let mut t = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += eigvecs[i][k] * inv_sqrt[k] * eigvecs[j][k];
                }
                t[i * dim + j] = acc;
            }
        }
        LinearTransform::new(dim, dim, t)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the eigenvector matrix V with v[i][k] the i-th component
/// of eigenvector k, so A = V diag(vals) V^T.
fn jacobi_eigh(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    if n < 2 {
        return (a.iter().enumerate().map(|(i, r)| r[i]).collect(), v);
    }

    for _sweep in 0..100 {
        let mut off = 0.0;
        let mut frob = 0.0;
        for i in 0..n {
            for j in 0..n {
                frob += a[i][j] * a[i][j];
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off.sqrt() <= 1e-12 * frob.sqrt().max(1e-300) {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p][i];
                    let aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for row in v.iter_mut() {
                    let vip = row[p];
                    let viq = row[q];
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    (a.iter().enumerate().map(|(i, r)| r[i]).collect(), v)
}

/// Labeled out-of-domain data pooled into the operator estimation set.
pub struct MixData {
    pub embeddings: EmbeddingSet,
    pub manifest: Manifest,
}

#[derive(Debug, Clone)]
pub struct RoundConfig {
    /// Pool records at or below this duration are dropped before clustering.
    pub min_duration: f64,
    /// Cluster on length-normalized embeddings. The operator always
    /// estimates on the un-normalized ones.
    pub normalize: bool,
    /// Candidate cluster counts for the SSE sweep. At least 3 are needed for
    /// elbow detection unless `k_override` picks the count directly.
    pub ks: Vec<usize>,
    pub k_override: Option<usize>,
    pub seed: u64,
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            min_duration: 1.0,
            normalize: true,
            ks: Vec::new(),
            k_override: None,
            seed: 42,
            max_iters: KMEANS_DEFAULT_MAX_ITERS,
            restarts: KMEANS_DEFAULT_RESTARTS,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageMetrics {
    pub eer: f64,
    pub min_dcf: f64,
}

/// Validation metrics after each stage of the scoring cascade.
#[derive(Debug, Clone, Copy)]
pub struct CascadeReport {
    pub raw: StageMetrics,
    pub normalized: StageMetrics,
    pub calibrated: StageMetrics,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub pool_size: usize,
    pub kept: usize,
    pub removed_short: usize,
    pub curve: SseCurve,
    pub chosen_k: usize,
    pub elbow: Option<ElbowResult>,
    /// Only when a ground-truth manifest was supplied.
    pub purity: Option<f64>,
    /// Only when a validation setup was supplied.
    pub validation: Option<CascadeReport>,
}

pub struct RoundOutcome {
    pub report: RoundReport,
    /// Raw extracted embeddings of the kept pool, before normalization.
    pub embeddings: EmbeddingSet,
    pub pseudo_labels: Manifest,
    pub clustering: Clustering,
    pub transform: LinearTransform,
}

/// One adaptation round: filter the pool by duration, extract, cluster,
/// pseudo-label, and estimate a transform from the pseudo-labels (plus any
/// mix-in data). The pool manifest's own speaker column is never read.
pub fn run_round(
    round: usize,
    pool: &Manifest,
    extractor: &dyn Extractor,
    cfg: &RoundConfig,
    operator: &dyn AdaptationOperator,
    truth: Option<&Manifest>,
    mix: Option<&MixData>,
) -> Result<RoundOutcome> {
    let kept_manifest = data::filter_short(pool, cfg.min_duration)?;
    if kept_manifest.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no pool utterances longer than {}s",
            cfg.min_duration
        )));
    }
    let removed_short = pool.len() - kept_manifest.len();

    let ids: Vec<&str> = kept_manifest.iter().map(|r| r.id.as_str()).collect();
    let raw = extract_all(extractor, &ids)?;
    let work = if cfg.normalize {
        data::l2_normalize(&raw)?
    } else {
        raw.clone()
    };

    let mut ks = cfg.ks.clone();
    if let Some(k) = cfg.k_override {
        ks.push(k);
    }
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(Error::InvalidParameter(
            "no candidate cluster counts and no explicit K".into(),
        ));
    }
    for &k in &ks {
        if k == 0 || k > work.len() {
            return Err(Error::InvalidParameter(format!(
                "candidate K {k} out of range 1..={}",
                work.len()
            )));
        }
    }

    let curve = clustering::sse_curve(&work, &ks, cfg.seed, cfg.max_iters, cfg.restarts)?;
    let elbow = if curve.len() >= 3 {
        match clustering::detect_elbow(&curve) {
            Ok(e) => Some(e),
            // A flat curve only matters when it was supposed to pick K.
            Err(err) if cfg.k_override.is_some() => {
                let _ = err;
                None
            }
            Err(err) => return Err(err),
        }
    } else {
        None
    };
    let chosen_k = match (cfg.k_override, &elbow) {
        (Some(k), _) => k,
        (None, Some(e)) => e.k,
        (None, None) => {
            return Err(Error::InvalidParameter(
                "elbow detection needs at least 3 candidate cluster counts; \
                 give more candidates or an explicit K"
                    .into(),
            ))
        }
    };

    // Same seed as the sweep entry for this K, so the sweep row and the
    // final clustering agree exactly.
    let clustering = clustering::kmeans(
        &work,
        chosen_k,
        clustering::curve_seed(cfg.seed, chosen_k),
        cfg.max_iters,
        cfg.restarts,
    )?;
    let pseudo_labels = clustering::assign_pseudo_labels(&work, &clustering, Some(&kept_manifest))?;

    let purity = match truth {
        Some(t) => {
            let mut sub = Manifest::new();
            for r in pseudo_labels.iter() {
                let tr = t.get(&r.id).ok_or_else(|| Error::UnknownId {
                    id: r.id.clone(),
                    context: "truth manifest".into(),
                })?;
                sub.push(tr.clone())?;
            }
            Some(clustering::cluster_purity(&pseudo_labels, &sub)?)
        }
        None => None,
    };

    let transform = match mix {
        None => operator.estimate(&raw, &pseudo_labels)?,
        Some(m) => {
            if m.embeddings.dim() != raw.dim() {
                return Err(Error::Mismatch(format!(
                    "mix embeddings are {}-dimensional, pool embeddings {}",
                    m.embeddings.dim(),
                    raw.dim()
                )));
            }
            let mut est_set = raw.clone();
            let mut est_labels = pseudo_labels.clone();
            for e in m.embeddings.iter() {
                let rec = m.manifest.get(&e.id).ok_or_else(|| Error::UnknownId {
                    id: e.id.clone(),
                    context: "mix manifest".into(),
                })?;
                if rec.speaker.is_none() {
                    return Err(Error::InvalidParameter(format!(
                        "mix record '{}' has no speaker label",
                        e.id
                    )));
                }
                est_set.push(e.clone())?;
                est_labels.push(rec.clone())?;
            }
            operator.estimate(&est_set, &est_labels)?
        }
    };
    if transform.cols() != raw.dim() {
        return Err(Error::Mismatch(format!(
            "operator produced a transform over {} inputs for {}-dimensional embeddings",
            transform.cols(),
            raw.dim()
        )));
    }

    Ok(RoundOutcome {
        report: RoundReport {
            round,
            pool_size: pool.len(),
            kept: kept_manifest.len(),
            removed_short,
            curve,
            chosen_k,
            elbow,
            purity,
            validation: None,
        },
        embeddings: raw,
        pseudo_labels,
        clustering,
        transform,
    })
}

#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub rounds: usize,
    pub round: RoundConfig,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            rounds: 1,
            round: RoundConfig::default(),
        }
    }
}

/// Validation data for [`evaluate_cascade`]: trials with known labels, a
/// manifest with durations for every trial utterance, and a pool of ids to
/// draw the normalization cohort from.
pub struct EvalSetup {
    pub trials: TrialList,
    pub manifest: Manifest,
    pub cohort_ids: Vec<String>,
    pub cohort_size: usize,
    pub as_norm: AsNormConfig,
    pub d_min_margin: f64,
    pub fit: FitOptions,
    pub dcf: DcfParams,
    pub seed: u64,
}

impl EvalSetup {
    /// Cohort size and top-N default to 400, shrunk to fit the pool.
    pub fn new(trials: TrialList, manifest: Manifest, cohort_ids: Vec<String>) -> Self {
        let cohort_size = cohort_ids.len().min(400);
        let mut as_norm = AsNormConfig::default();
        as_norm.top_n = as_norm.top_n.min(cohort_size);
        EvalSetup {
            trials,
            manifest,
            cohort_ids,
            cohort_size,
            as_norm,
            d_min_margin: 0.01,
            fit: FitOptions::default(),
            dcf: DcfParams::default(),
            seed: 42,
        }
    }
}

fn stage_metrics(
    scores: &crate::data::ScoreSet,
    trials: &TrialList,
    dcf: &DcfParams,
) -> Result<StageMetrics> {
    let (s, y) = data::labeled_scores(scores, trials)?;
    Ok(StageMetrics {
        eer: metrics::eer(&s, &y)?,
        min_dcf: metrics::min_dcf(&s, &y, dcf)?,
    })
}

const COHORT_STREAM: u64 = 0xC0_4024;

/// Seed [`evaluate_cascade`] passes to the cohort draw. Exposed so external
/// tools can reproduce the cohort with a direct sampling call.
pub fn cohort_seed(seed: u64) -> u64 {
    seeding::derive(seed, COHORT_STREAM)
}

/// Scores the validation trials with the given extractor through the full
/// cascade and reports metrics after each stage. The calibration model is
/// fit on the validation trials themselves; the reported calibrated
/// metrics measure what the quality features can add, not held-out
/// performance.
pub fn evaluate_cascade(extractor: &dyn Extractor, setup: &EvalSetup) -> Result<CascadeReport> {
    let trial_ids = setup.trials.utterance_ids();
    if trial_ids.is_empty() {
        return Err(Error::EmptyInput("no validation trials".into()));
    }
    let val_set = extract_all(extractor, &trial_ids)?;
    let raw_scores = scoring::score_trials(&val_set, &setup.trials)?;
    let raw = stage_metrics(&raw_scores, &setup.trials, &setup.dcf)?;

    let cohort_refs: Vec<&str> = setup.cohort_ids.iter().map(|s| s.as_str()).collect();
    if cohort_refs.is_empty() {
        return Err(Error::EmptyInput("no cohort ids".into()));
    }
    let pool_set = extract_all(extractor, &cohort_refs)?;
    let cohort = scoring::random_cohort(&pool_set, setup.cohort_size, cohort_seed(setup.seed))?;
    let norm_scores = scoring::as_norm(&raw_scores, &val_set, &cohort, &setup.as_norm)?;
    let normalized = stage_metrics(&norm_scores, &setup.trials, &setup.dcf)?;

    let d_min = calibration::d_min_for_scores(&norm_scores, &setup.manifest, setup.d_min_margin)?;
    let features = calibration::qmf_features(&norm_scores, &val_set, &setup.manifest, d_min)?;
    let mut fit_features = Vec::new();
    let mut fit_labels = Vec::new();
    for (f, t) in features.iter().zip(setup.trials.iter()) {
        match t.label {
            TrialLabel::Target => {
                fit_features.push(*f);
                fit_labels.push(true);
            }
            TrialLabel::Nontarget => {
                fit_features.push(*f);
                fit_labels.push(false);
            }
            TrialLabel::Unknown => {}
        }
    }
    let model = calibration::fit_calibration(&fit_features, &fit_labels, d_min, &setup.fit)?;
    let cal_scores = calibration::apply_calibration(&model, &norm_scores, &features)?;
    let calibrated = stage_metrics(&cal_scores, &setup.trials, &setup.dcf)?;

    Ok(CascadeReport {
        raw,
        normalized,
        calibrated,
    })
}

pub struct AdaptationRun<'a> {
    /// Cascade metrics with the unadapted extractor, when evaluation was
    /// requested.
    pub baseline: Option<CascadeReport>,
    pub rounds: Vec<RoundOutcome>,
    /// Base extractor with every round's transform applied.
    pub extractor: ChainExtractor<'a>,
}

/// Runs `cfg.rounds` adaptation rounds, wrapping the extractor with each
/// round's transform before the next one starts. Every round reuses the same
/// round seed, so with the identity operator each round reproduces the
/// previous round's pseudo-labels exactly.
pub fn run_adaptation<'a>(
    pool: &Manifest,
    base: &'a dyn Extractor,
    cfg: &AdaptationConfig,
    operator: &dyn AdaptationOperator,
    truth: Option<&Manifest>,
    mix: Option<&MixData>,
    eval: Option<&EvalSetup>,
) -> Result<AdaptationRun<'a>> {
    if cfg.rounds == 0 {
        return Err(Error::InvalidParameter("at least 1 round required".into()));
    }
    let baseline = match eval {
        Some(setup) => Some(evaluate_cascade(base, setup)?),
        None => None,
    };
    let mut chain = ChainExtractor::new(base);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for r in 1..=cfg.rounds {
        let mut outcome = run_round(r, pool, &chain, &cfg.round, operator, truth, mix)?;
        chain.push(outcome.transform.clone())?;
        if let Some(setup) = eval {
            outcome.report.validation = Some(evaluate_cascade(&chain, setup)?);
        }
        rounds.push(outcome);
    }
    Ok(AdaptationRun {
        baseline,
        rounds,
        extractor: chain,
    })
}

fn opt_float(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".into(),
    }
}

pub const SUMMARY_HEADER: &str = "round\tpool\tkept\tremoved_short\tchosen_k\telbow_k\telbow_degenerate\tpurity\teer_raw\tmindcf_raw\teer_norm\tmindcf_norm\teer_cal\tmindcf_cal";

fn cascade_cells(c: Option<&CascadeReport>) -> String {
    match c {
        Some(c) => format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            c.raw.eer,
            c.raw.min_dcf,
            c.normalized.eer,
            c.normalized.min_dcf,
            c.calibrated.eer,
            c.calibrated.min_dcf
        ),
        None => "-\t-\t-\t-\t-\t-".into(),
    }
}

impl RoundReport {
    pub fn tsv_row(&self) -> String {
        let (elbow_k, degenerate) = match &self.elbow {
            Some(e) => (e.k.to_string(), e.degenerate.to_string()),
            None => ("-".into(), "-".into()),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.round,
            self.pool_size,
            self.kept,
            self.removed_short,
            self.chosen_k,
            elbow_k,
            degenerate,
            opt_float(self.purity),
            cascade_cells(self.validation.as_ref())
        )
    }
}

/// Summary table over an adaptation run: a header line, a `round 0` row for
/// the baseline when present, then one row per round.
pub fn summary_tsv(baseline: Option<&CascadeReport>, rounds: &[&RoundReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    if let Some(b) = baseline {
        out.push_str(&format!(
            "0\t-\t-\t-\t-\t-\t-\t-\t{}\n",
            cascade_cells(Some(b))
        ));
    }
    for r in rounds {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestRecord;
    use crate::synth::{generate_corpus, make_trials, SynthConfig};

    fn small_corpus() -> crate::synth::SynthCorpus {
        generate_corpus(&SynthConfig {
            speakers: 6,
            utterances_per_speaker: 8,
            feature_dim: 16,
            within_spread: 0.05,
            domain_shift: 0.3,
            duration_range: (0.5, 3.0),
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn file_backed_extractor_serves_and_rejects() {
        let c = small_corpus();
        let first = c.features.entries()[0].clone();
        let ex = FileBackedExtractor::new(c.features).unwrap();
        assert_eq!(ex.dim(), 16);
        assert_eq!(ex.extract(&first.id).unwrap(), first.vector);
        assert!(matches!(
            ex.extract("nope"),
            Err(Error::UnknownId { .. })
        ));
    }

    #[test]
    fn synthetic_extractor_is_deterministic_and_quantized() {
        let c = small_corpus();
        let a = SyntheticLinearExtractor::new(c.features.clone(), 8, 5).unwrap();
        let b = SyntheticLinearExtractor::new(c.features.clone(), 8, 5).unwrap();
        let id = &c.features.entries()[3].id;
        let va = a.extract(id).unwrap();
        assert_eq!(va, b.extract(id).unwrap());
        assert_eq!(va.len(), 8);
        for &x in &va {
            assert_eq!(x, x as f32 as f64);
        }
        let other = SyntheticLinearExtractor::new(c.features.clone(), 8, 6).unwrap();
        assert_ne!(va, other.extract(id).unwrap());
    }

    #[test]
    fn identity_chain_preserves_values() {
        let c = small_corpus();
        let base = FileBackedExtractor::new(c.features.clone()).unwrap();
        let mut chain = ChainExtractor::new(&base);
        chain.push(LinearTransform::identity(16)).unwrap();
        chain.push(LinearTransform::identity(16)).unwrap();
        let id = &c.features.entries()[0].id;
        let got = chain.extract(id).unwrap();
        let want = &c.features.entries()[0].vector;
        for (g, w) in got.iter().zip(want) {
            assert_eq!(g, w);
        }
        assert!(chain.transforms()[0].is_identity());
    }

    #[test]
    fn transform_shape_errors() {
        assert!(LinearTransform::new(2, 2, vec![1.0; 3]).is_err());
        assert!(LinearTransform::new(0, 2, vec![]).is_err());
        assert!(LinearTransform::new(1, 1, vec![f64::NAN]).is_err());
        let t = LinearTransform::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(t.apply(&[1.0, 2.0]).is_err());
        let base_set = EmbeddingSet::from_entries(vec![Embedding::new("a", vec![1.0, 2.0])]).unwrap();
        let base = FileBackedExtractor::new(base_set).unwrap();
        let mut chain = ChainExtractor::new(&base);
        assert!(chain.push(LinearTransform::identity(3)).is_err());
    }

    #[test]
    fn jacobi_reconstructs_a_symmetric_matrix() {
        let mut rng = crate::seeding::rng(9);
        let n = 6;
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let x: f64 = rand::Rng::random_range(&mut rng, -1.0..1.0);
                a[i][j] = x;
                a[j][i] = x;
            }
        }
        let (vals, vecs) = jacobi_eigh(a.clone());
        for i in 0..n {
            for j in 0..n {
                let mut rec = 0.0;
                let mut dot = 0.0;
                for k in 0..n {
                    rec += vecs[i][k] * vals[k] * vecs[j][k];
                    dot += vecs[k][i] * vecs[k][j];
                }
                assert!((rec - a[i][j]).abs() < 1e-9, "A[{i}][{j}] {} vs {rec}", a[i][j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9, "V^T V [{i}][{j}] = {dot}");
            }
        }
    }

    #[test]
    fn whitening_flattens_within_class_covariance() {
        let mut rng = crate::seeding::rng(21);
        let dim = 4;
        let scales = [2.0, 0.5, 1.5, 0.2];
        let mut set = EmbeddingSet::new();
        let mut labels = Manifest::new();
        for c in 0..3 {
            let center: Vec<f64> = (0..dim)
                .map(|_| rand::Rng::sample(&mut rng, rand_distr::StandardNormal))
                .map(|x: f64| x * 5.0)
                .collect();
            for u in 0..300 {
                let id = format!("c{c}_u{u}");
                let v: Vec<f64> = (0..dim)
                    .map(|i| {
                        let g: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                        center[i] + scales[i] * g
                    })
                    .collect();
                set.push(Embedding::new(id.clone(), v)).unwrap();
                labels
                    .push(ManifestRecord::new(id, Some(format!("s{c}")), 2.0))
                    .unwrap();
            }
        }

        let op = WithinClassWhitening::default();
        let t = op.estimate(&set, &labels).unwrap();

        // Within-class covariance of the transformed data should be near
        // identity (the ridge shrinks it slightly below).
        let transformed: Vec<Vec<f64>> = set.iter().map(|e| t.apply(&e.vector).unwrap()).collect();
        let mut means = vec![vec![0.0; dim]; 3];
        for (i, v) in transformed.iter().enumerate() {
            let c = i / 300;
            for (m, x) in means[c].iter_mut().zip(v) {
                *m += x / 300.0;
            }
        }
        let mut cov = vec![vec![0.0; dim]; dim];
        for (i, v) in transformed.iter().enumerate() {
            let c = i / 300;
            let d: Vec<f64> = v.iter().zip(&means[c]).map(|(x, m)| x - m).collect();
            for a in 0..dim {
                for b in 0..dim {
                    cov[a][b] += d[a] * d[b] / transformed.len() as f64;
                }
            }
        }
        for a in 0..dim {
            for b in 0..dim {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (cov[a][b] - want).abs() < 0.1,
                    "cov[{a}][{b}] = {}",
                    cov[a][b]
                );
            }
        }
    }

    #[test]
    fn whitening_requires_labels() {
        let c = small_corpus();
        let op = WithinClassWhitening::default();
        assert!(op.estimate(&c.features, &c.unlabeled).is_err());
        let bad = WithinClassWhitening { ridge: 0.0 };
        assert!(bad.estimate(&c.features, &c.truth).is_err());
    }

    #[test]
    fn round_filters_and_respects_override() {
        let c = small_corpus();
        let base = FileBackedExtractor::new(c.features.clone()).unwrap();
        let cfg = RoundConfig {
            min_duration: 1.0,
            k_override: Some(6),
            seed: 3,
            ..RoundConfig::default()
        };
        let out = run_round(
            1,
            &c.unlabeled,
            &base,
            &cfg,
            &IdentityOperator,
            Some(&c.truth),
            None,
        )
        .unwrap();
        let r = &out.report;
        assert_eq!(r.pool_size, 48);
        assert_eq!(r.kept + r.removed_short, 48);
        assert!(r.removed_short > 0, "duration range (0.5, 3.0) should shed some");
        assert_eq!(r.chosen_k, 6);
        assert!(r.elbow.is_none());
        let purity = r.purity.unwrap();
        assert!(purity >= 0.9, "tight blobs should cluster cleanly, purity {purity}");
        assert_eq!(out.pseudo_labels.len(), r.kept);
        assert_eq!(out.pseudo_labels.speaker_count(), 6);
        assert!(out.transform.is_identity());
        // Raw embeddings are pre-normalization.
        let any = out.embeddings.entries()[0].norm();
        assert!((any - 1.0).abs() > 1e-6);
    }

    #[test]
    fn elbow_picks_k_when_not_overridden() {
        let c = generate_corpus(&SynthConfig {
            speakers: 5,
            utterances_per_speaker: 10,
            feature_dim: 12,
            within_spread: 0.03,
            domain_shift: 0.0,
            duration_range: (2.0, 3.0),
            seed: 17,
        })
        .unwrap();
        let base = FileBackedExtractor::new(c.features.clone()).unwrap();
        let cfg = RoundConfig {
            ks: vec![2, 3, 4, 5, 7, 9, 12],
            seed: 5,
            ..RoundConfig::default()
        };
        let out = run_round(1, &c.unlabeled, &base, &cfg, &IdentityOperator, None, None).unwrap();
        assert_eq!(out.report.chosen_k, out.report.elbow.unwrap().k);
        assert_eq!(out.report.curve.len(), 7);
    }

    #[test]
    fn identity_operator_repeats_pseudo_labels_across_rounds() {
        let c = small_corpus();
        let base = FileBackedExtractor::new(c.features.clone()).unwrap();
        let cfg = AdaptationConfig {
            rounds: 3,
            round: RoundConfig {
                k_override: Some(6),
                seed: 8,
                ..RoundConfig::default()
            },
        };
        let run = run_adaptation(
            &c.unlabeled,
            &base,
            &cfg,
            &IdentityOperator,
            None,
            None,
            None,
        )
        .unwrap();
        assert!(run.baseline.is_none());
        assert_eq!(run.rounds.len(), 3);
        let first = &run.rounds[0].pseudo_labels;
        for later in &run.rounds[1..] {
            assert_eq!(first, &later.pseudo_labels);
        }
        assert_eq!(run.extractor.transforms().len(), 3);
    }

    #[test]
    fn cascade_reports_zero_eer_on_separable_data() {
        let c = generate_corpus(&SynthConfig {
            speakers: 10,
            utterances_per_speaker: 6,
            feature_dim: 24,
            within_spread: 0.02,
            domain_shift: 0.0,
            duration_range: (2.0, 10.0),
            seed: 29,
        })
        .unwrap();
        let trials = make_trials(&c.truth, 40, 40, 2).unwrap();
        let cohort_ids: Vec<String> = c.truth.iter().map(|r| r.id.clone()).collect();
        let mut setup = EvalSetup::new(trials, c.truth.clone(), cohort_ids);
        setup.cohort_size = 30;
        setup.as_norm.top_n = 20;
        let base = FileBackedExtractor::new(c.features.clone()).unwrap();
        let rep = evaluate_cascade(&base, &setup).unwrap();
        assert_eq!(rep.raw.eer, 0.0);
        assert!(rep.normalized.eer.is_finite() && rep.calibrated.eer.is_finite());
        assert!(rep.raw.min_dcf <= 1.0 && rep.normalized.min_dcf <= 1.0);
    }

    #[test]
    fn summary_table_has_one_row_per_round_plus_baseline() {
        let c = small_corpus();
        let trials = make_trials(&c.truth, 30, 30, 4).unwrap();
        let cohort_ids: Vec<String> = c.truth.iter().map(|r| r.id.clone()).collect();
        let mut setup = EvalSetup::new(trials, c.truth.clone(), cohort_ids);
        setup.cohort_size = 20;
        setup.as_norm.top_n = 10;
        let base = FileBackedExtractor::new(c.features.clone()).unwrap();
        let cfg = AdaptationConfig {
            rounds: 2,
            round: RoundConfig {
                k_override: Some(6),
                ..RoundConfig::default()
            },
        };
        let run = run_adaptation(
            &c.unlabeled,
            &base,
            &cfg,
            &WithinClassWhitening::default(),
            Some(&c.truth),
            None,
            Some(&setup),
        )
        .unwrap();
        assert!(run.baseline.is_some());
        let reports: Vec<&RoundReport> = run.rounds.iter().map(|o| &o.report).collect();
        let tsv = summary_tsv(run.baseline.as_ref(), &reports);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert!(lines[1].starts_with("0\t"));
        assert!(lines[2].starts_with("1\t"));
        assert!(lines[3].starts_with("2\t"));
        let cols = lines[2].split('\t').count();
        assert_eq!(cols, SUMMARY_HEADER.split('\t').count());
        for o in &run.rounds {
            assert!(o.report.validation.is_some());
            assert!(o.report.purity.is_some());
        }
    }
}

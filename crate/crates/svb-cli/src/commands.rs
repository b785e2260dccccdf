use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};

use svb_core::adaptation::{
    self, AdaptationConfig, AdaptationOperator, EvalSetup, FileBackedExtractor, IdentityOperator,
    MixData, RoundConfig, RoundReport, WithinClassWhitening,
};
use svb_core::calibration::{
    apply_calibration, d_min_for_scores, fit_calibration, load_model, qmf_features, save_model,
    FitOptions,
};
use svb_core::clustering::{
    assign_pseudo_labels, cluster_purity, curve_seed, detect_elbow, kmeans, sse_curve, SseCurve,
    KMEANS_DEFAULT_MAX_ITERS,
};
use svb_core::data::io::{
    detect_embedding_format, load_embeddings, load_manifest, load_scores, load_trials,
    save_embeddings, save_manifest, save_scores, save_trials, write_atomic, EmbeddingFormat,
};
use svb_core::data::{
    augment_manifest, filter_short, l2_normalize, labeled_scores, truncate_durations, EmbeddingSet,
    Manifest, TrialLabel,
};
use svb_core::margin::{finite_difference_check, GradCheckConfig};
use svb_core::metrics::{det_curve, eer_from_curve, min_dcf_from_curve, DcfParams};
use svb_core::scoring::{
    as_norm, fuse, random_cohort, score_trials, speaker_mean_cohort, AsNormConfig, Cohort,
    CohortSource,
};
use svb_core::synth::{generate_corpus, make_trials, SynthConfig};

use crate::config::{parse_ks, Settings};
use crate::CliError;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Subcommand)]
pub enum Command {
    /// Score trials by cosine similarity of their embeddings
    Score(ScoreArgs),
    /// Apply adaptive symmetric score normalization
    Asnorm(AsnormArgs),
    /// Fit a quality-aware calibration model on labeled trials
    QmfFit(QmfFitArgs),
    /// Apply a fitted calibration model to a score file
    QmfApply(QmfApplyArgs),
    /// Fuse aligned score files into one system
    Fuse(FuseArgs),
    /// Report EER and minimum detection cost on labeled trials
    Metrics(MetricsArgs),
    /// Cluster embeddings with k-means
    Cluster(ClusterArgs),
    /// Pick a cluster count at the knee of the SSE-vs-K curve
    Elbow(ElbowArgs),
    /// Cluster embeddings and write a pseudo-labeled manifest
    PseudoLabel(PseudoLabelArgs),
    /// Run the semi-supervised adaptation loop
    AdaptRun(AdaptRunArgs),
    /// Add tempo-perturbed copies to a manifest
    ManifestAugment(ManifestAugmentArgs),
    /// Drop short utterances and/or cap durations in a manifest
    ManifestFilter(ManifestFilterArgs),
    /// Check margin-loss gradients against finite differences
    LossCheck(LossCheckArgs),
    /// Generate a seeded synthetic corpus
    SynthGen(SynthGenArgs),
}

pub fn run(cmd: &Command, st: &Settings) -> Result<(), CliError> {
    match cmd {
        Command::Score(a) => run_score(a),
        Command::Asnorm(a) => run_asnorm(a, st),
        Command::QmfFit(a) => run_qmf_fit(a, st),
        Command::QmfApply(a) => run_qmf_apply(a),
        Command::Fuse(a) => run_fuse(a),
        Command::Metrics(a) => run_metrics(a, st),
        Command::Cluster(a) => run_cluster(a, st),
        Command::Elbow(a) => run_elbow(a, st),
        Command::PseudoLabel(a) => run_pseudo_label(a, st),
        Command::AdaptRun(a) => run_adapt(a, st),
        Command::ManifestAugment(a) => run_manifest_augment(a),
        Command::ManifestFilter(a) => run_manifest_filter(a),
        Command::LossCheck(a) => run_loss_check(a, st),
        Command::SynthGen(a) => run_synth_gen(a, st),
    }
}

fn load_embeddings_any(path: &Path) -> Result<EmbeddingSet, CliError> {
    let format = detect_embedding_format(path)?;
    Ok(load_embeddings(path, format)?)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Data(svb_core::Error::io(path, e)))
}

/// Truth records in pseudo-label order, for the purity computation.
fn truth_subset(pseudo: &Manifest, truth: &Manifest) -> Result<Manifest, CliError> {
    let mut sub = Manifest::new();
    for r in pseudo.iter() {
        let t = truth.get(&r.id).ok_or_else(|| svb_core::Error::UnknownId {
            id: r.id.clone(),
            context: "truth manifest".into(),
        })?;
        sub.push(t.clone())?;
    }
    Ok(sub)
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Embedding file, binary or TSV
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// Trial list
    #[arg(long, value_name = "PATH")]
    trials: PathBuf,
    /// Output score file
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn run_score(a: &ScoreArgs) -> Result<(), CliError> {
    let set = load_embeddings_any(&a.embeddings)?;
    let trials = load_trials(&a.trials)?;
    let scores = score_trials(&set, &trials)?;
    save_scores(&a.out, &scores)?;
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum CohortMode {
    /// Use the cohort file's embeddings as they are
    External,
    /// Average each speaker's normalized embeddings (needs --cohort-manifest)
    SpeakerMeans,
    /// Sample utterances from the cohort file (needs --cohort-size)
    Random,
}

#[derive(Args)]
pub struct AsnormArgs {
    /// Raw score file to normalize
    #[arg(long, value_name = "PATH")]
    scores: PathBuf,
    /// Embeddings for every trial utterance
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// Cohort embedding file
    #[arg(long, value_name = "PATH")]
    cohort: PathBuf,
    #[arg(long, value_enum, default_value = "external")]
    cohort_mode: CohortMode,
    /// Labeled manifest for speaker-means mode
    #[arg(long, value_name = "PATH")]
    cohort_manifest: Option<PathBuf>,
    /// Sample size for random mode
    #[arg(long)]
    cohort_size: Option<usize>,
    /// Cohort scores kept per side (default from config, 400)
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn run_asnorm(a: &AsnormArgs, st: &Settings) -> Result<(), CliError> {
    let raw = load_scores(&a.scores)?;
    let set = load_embeddings_any(&a.embeddings)?;
    let cohort_set = load_embeddings_any(&a.cohort)?;
    let cohort = match a.cohort_mode {
        CohortMode::External => Cohort::from_set(&cohort_set, CohortSource::External)?,
        CohortMode::SpeakerMeans => {
            let path = a
                .cohort_manifest
                .as_ref()
                .ok_or_else(|| usage("speaker-means mode needs --cohort-manifest"))?;
            let manifest = load_manifest(path)?;
            speaker_mean_cohort(&cohort_set, &manifest)?
        }
        CohortMode::Random => {
            let size = a
                .cohort_size
                .ok_or_else(|| usage("random mode needs --cohort-size"))?;
            random_cohort(&cohort_set, size, st.seed)?
        }
    };
    let cfg = AsNormConfig {
        top_n: a.top_n.unwrap_or(st.as_norm_top_n),
        ..AsNormConfig::default()
    };
    let normalized = as_norm(&raw, &set, &cohort, &cfg)?;
    save_scores(&a.out, &normalized)?;
    Ok(())
}

#[derive(Args)]
pub struct QmfFitArgs {
    /// Score file the model will calibrate
    #[arg(long, value_name = "PATH")]
    scores: PathBuf,
    /// Trial list providing the target/nontarget labels, aligned with the
    /// scores; unlabeled trials are skipped
    #[arg(long, value_name = "PATH")]
    trials: PathBuf,
    /// Raw (un-normalized) embeddings for magnitude features
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// Manifest with durations for every trial utterance
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Margin below the shortest duration (default from config, 0.01)
    #[arg(long)]
    d_min_margin: Option<f64>,
    /// Output model file
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn run_qmf_fit(a: &QmfFitArgs, st: &Settings) -> Result<(), CliError> {
    let scores = load_scores(&a.scores)?;
    let trials = load_trials(&a.trials)?;
    scores.check_aligned(&trials)?;
    let set = load_embeddings_any(&a.embeddings)?;
    let manifest = load_manifest(&a.manifest)?;
    let margin = a.d_min_margin.unwrap_or(st.qmf_d_min_margin);
    let d_min = d_min_for_scores(&scores, &manifest, margin)?;
    let features = qmf_features(&scores, &set, &manifest, d_min)?;
    let mut fit_features = Vec::new();
    let mut fit_labels = Vec::new();
    for (f, t) in features.iter().zip(trials.iter()) {
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
    let model = fit_calibration(&fit_features, &fit_labels, d_min, &FitOptions::default())?;
    eprintln!(
        "fit on {} trials: converged {} after {} iterations, gradient norm {:.6e}",
        fit_features.len(),
        model.converged,
        model.iterations,
        model.grad_norm
    );
    save_model(&a.out, &model)?;
    Ok(())
}

#[derive(Args)]
pub struct QmfApplyArgs {
    #[arg(long, value_name = "PATH")]
    scores: PathBuf,
    /// Raw (un-normalized) embeddings for magnitude features
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Model file from qmf-fit
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn run_qmf_apply(a: &QmfApplyArgs) -> Result<(), CliError> {
    let scores = load_scores(&a.scores)?;
    let set = load_embeddings_any(&a.embeddings)?;
    let manifest = load_manifest(&a.manifest)?;
    let model = load_model(&a.model)?;
    let features = qmf_features(&scores, &set, &manifest, model.d_min)?;
    let calibrated = apply_calibration(&model, &scores, &features)?;
    save_scores(&a.out, &calibrated)?;
    Ok(())
}

#[derive(Args)]
pub struct FuseArgs {
    /// Score file; repeat once per system
    #[arg(long = "scores", value_name = "PATH", required = true)]
    scores: Vec<PathBuf>,
    /// Comma-separated weights, one per system (default: plain mean)
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn run_fuse(a: &FuseArgs) -> Result<(), CliError> {
    let mut systems = Vec::with_capacity(a.scores.len());
    for p in &a.scores {
        systems.push(load_scores(p)?);
    }
    let refs: Vec<&svb_core::data::ScoreSet> = systems.iter().collect();
    let weights = match &a.weights {
        Some(s) => {
            let mut w = Vec::new();
            for part in s.split(',') {
                let v: f64 = part
                    .trim()
                    .parse()
                    .map_err(|_| usage(format!("bad weight '{}'", part.trim())))?;
                w.push(v);
            }
            Some(w)
        }
        None => None,
    };
    let fused = fuse(&refs, weights.as_deref())?;
    save_scores(&a.out, &fused)?;
    Ok(())
}

#[derive(Args)]
pub struct MetricsArgs {
    #[arg(long, value_name = "PATH")]
    scores: PathBuf,
    /// Labeled trial list aligned with the scores
    #[arg(long, value_name = "PATH")]
    trials: PathBuf,
    /// Target prior for the detection cost (default from config, 0.05)
    #[arg(long)]
    p_target: Option<f64>,
    /// Write the DET curve as TSV
    #[arg(long, value_name = "PATH")]
    det_out: Option<PathBuf>,
}

fn run_metrics(a: &MetricsArgs, st: &Settings) -> Result<(), CliError> {
    let scores = load_scores(&a.scores)?;
    let trials = load_trials(&a.trials)?;
    scores.check_aligned(&trials)?;
    let (s, y) = labeled_scores(&scores, &trials)?;
    let p_target = a.p_target.unwrap_or(st.dcf_p_target);
    let params = DcfParams {
        p_target,
        ..DcfParams::default()
    };
    let curve = det_curve(&s, &y)?;
    let eer = eer_from_curve(&curve)?;
    let dcf = min_dcf_from_curve(&curve, &params)?;
    if let Some(path) = &a.det_out {
        write_atomic(path, curve.to_tsv().as_bytes())?;
    }
    println!("EER[%]\t{:.6}", eer * 100.0);
    println!("minDCF(p={p_target})\t{dcf:.6}");
    Ok(())
}

#[derive(Args)]
pub struct ClusterArgs {
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// Number of clusters
    #[arg(long)]
    k: usize,
    /// Restarts with derived seeds (default from config, 3)
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Cluster raw embeddings instead of length-normalized ones
    #[arg(long)]
    no_normalize: bool,
    /// Output assignments, one `id<TAB>cluster` line per embedding
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn run_cluster(a: &ClusterArgs, st: &Settings) -> Result<(), CliError> {
    let loaded = load_embeddings_any(&a.embeddings)?;
    let set = if a.no_normalize {
        loaded
    } else {
        l2_normalize(&loaded)?
    };
    let c = kmeans(
        &set,
        a.k,
        curve_seed(st.seed, a.k),
        a.max_iters.unwrap_or(KMEANS_DEFAULT_MAX_ITERS),
        a.restarts.unwrap_or(st.cluster_restarts),
    )?;
    let mut text = String::new();
    for (e, &ix) in set.iter().zip(&c.assignments) {
        text.push_str(&format!("{}\t{}\n", e.id, ix));
    }
    write_atomic(&a.out, text.as_bytes())?;
    println!("sse\t{:.6}", c.sse);
    println!("iterations\t{}", c.iterations);
    println!("converged\t{}", c.converged);
    Ok(())
}

#[derive(Args)]
pub struct ElbowArgs {
    /// Embeddings to sweep (alternative to --curve)
    #[arg(long, value_name = "PATH")]
    embeddings: Option<PathBuf>,
    /// Comma-separated candidate cluster counts (default from config)
    #[arg(long)]
    ks: Option<String>,
    /// Existing SSE curve TSV (alternative to --embeddings)
    #[arg(long, value_name = "PATH")]
    curve: Option<PathBuf>,
    /// Write the computed curve as TSV
    #[arg(long, value_name = "PATH")]
    curve_out: Option<PathBuf>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    no_normalize: bool,
}

fn run_elbow(a: &ElbowArgs, st: &Settings) -> Result<(), CliError> {
    let curve = match (&a.curve, &a.embeddings) {
        (Some(path), None) => SseCurve::load(path)?,
        (None, Some(path)) => {
            let ks = match &a.ks {
                Some(s) => parse_ks(s)?,
                None => st
                    .cluster_ks
                    .clone()
                    .ok_or_else(|| usage("give --ks or set cluster.ks in the config"))?,
            };
            let loaded = load_embeddings_any(path)?;
            let set = if a.no_normalize {
                loaded
            } else {
                l2_normalize(&loaded)?
            };
            sse_curve(
                &set,
                &ks,
                st.seed,
                a.max_iters.unwrap_or(KMEANS_DEFAULT_MAX_ITERS),
                a.restarts.unwrap_or(st.cluster_restarts),
            )?
        }
        _ => return Err(usage("give exactly one of --curve or --embeddings")),
    };
    if let Some(path) = &a.curve_out {
        curve.save(path)?;
    }
    let e = detect_elbow(&curve)?;
    println!("k\t{}", e.k);
    println!("distance\t{:.6}", e.max_distance);
    println!("degenerate\t{}", e.degenerate);
    Ok(())
}

#[derive(Args)]
pub struct PseudoLabelArgs {
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// Cluster count (alternative to --ks)
    #[arg(long)]
    k: Option<usize>,
    /// Candidate counts for elbow selection (alternative to --k)
    #[arg(long)]
    ks: Option<String>,
    /// Source manifest; duration, tempo, and tags carry into the output
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Ground-truth manifest; prints cluster purity
    #[arg(long, value_name = "PATH")]
    truth: Option<PathBuf>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    no_normalize: bool,
    /// Output pseudo-labeled manifest
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn run_pseudo_label(a: &PseudoLabelArgs, st: &Settings) -> Result<(), CliError> {
    let loaded = load_embeddings_any(&a.embeddings)?;
    let set = if a.no_normalize {
        loaded
    } else {
        l2_normalize(&loaded)?
    };
    let max_iters = a.max_iters.unwrap_or(KMEANS_DEFAULT_MAX_ITERS);
    let restarts = a.restarts.unwrap_or(st.cluster_restarts);
    let k = match (a.k, &a.ks) {
        (Some(_), Some(_)) => return Err(usage("give --k or --ks, not both")),
        (Some(k), None) => k,
        (None, ks) => {
            let ks = match ks {
                Some(s) => parse_ks(s)?,
                None => st.cluster_ks.clone().ok_or_else(|| {
                    usage("give --k, --ks, or set cluster.ks in the config")
                })?,
            };
            let curve = sse_curve(&set, &ks, st.seed, max_iters, restarts)?;
            detect_elbow(&curve)?.k
        }
    };
    let c = kmeans(&set, k, curve_seed(st.seed, k), max_iters, restarts)?;
    let source = match &a.manifest {
        Some(p) => Some(load_manifest(p)?),
        None => None,
    };
    let pseudo = assign_pseudo_labels(&set, &c, source.as_ref())?;
    save_manifest(&a.out, &pseudo)?;
    println!("k\t{k}");
    println!("sse\t{:.6}", c.sse);
    if let Some(path) = &a.truth {
        let truth = load_manifest(path)?;
        let sub = truth_subset(&pseudo, &truth)?;
        println!("purity\t{:.6}", cluster_purity(&pseudo, &sub)?);
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum OperatorKind {
    /// Whiten the within-class covariance estimated from pseudo-labels
    Whitening,
    /// No-op transform; rounds then repeat exactly
    Identity,
}

#[derive(Args)]
pub struct AdaptRunArgs {
    /// Embeddings covering the pool and any validation utterances
    #[arg(long, value_name = "PATH")]
    embeddings: PathBuf,
    /// Unlabeled pool manifest; its speaker column is ignored
    #[arg(long, value_name = "PATH")]
    pool: PathBuf,
    #[arg(long)]
    rounds: Option<usize>,
    /// Cluster count override (skips elbow selection)
    #[arg(long)]
    k: Option<usize>,
    /// Candidate counts for elbow selection
    #[arg(long)]
    ks: Option<String>,
    #[arg(long, value_enum, default_value = "whitening")]
    operator: OperatorKind,
    /// Ridge for the whitening operator
    #[arg(long)]
    ridge: Option<f64>,
    /// Pool records at or below this duration are dropped (default 1.0)
    #[arg(long)]
    min_duration: Option<f64>,
    #[arg(long)]
    no_normalize: bool,
    /// Ground-truth manifest for purity reporting
    #[arg(long, value_name = "PATH")]
    truth: Option<PathBuf>,
    /// Labeled validation trials; enables per-round cascade metrics
    #[arg(long, value_name = "PATH")]
    val_trials: Option<PathBuf>,
    /// Manifest with durations for the validation utterances
    #[arg(long, value_name = "PATH")]
    val_manifest: Option<PathBuf>,
    /// Normalization cohort size drawn from the pool (default: min(400, pool))
    #[arg(long)]
    cohort_size: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    /// Labeled out-of-domain embeddings mixed into operator estimation
    #[arg(long, value_name = "PATH")]
    mix_embeddings: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    mix_manifest: Option<PathBuf>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Output directory: summary.tsv plus one round_<i>/ directory per round
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

fn run_adapt(a: &AdaptRunArgs, st: &Settings) -> Result<(), CliError> {
    let set = load_embeddings_any(&a.embeddings)?;
    let pool = load_manifest(&a.pool)?;
    let base = FileBackedExtractor::new(set)?;
    let truth = match &a.truth {
        Some(p) => Some(load_manifest(p)?),
        None => None,
    };
    let mix = match (&a.mix_embeddings, &a.mix_manifest) {
        (None, None) => None,
        (Some(e), Some(m)) => Some(MixData {
            embeddings: load_embeddings_any(e)?,
            manifest: load_manifest(m)?,
        }),
        _ => {
            return Err(usage(
                "give both --mix-embeddings and --mix-manifest, or neither",
            ))
        }
    };
    let eval = match (&a.val_trials, &a.val_manifest) {
        (None, None) => None,
        (Some(t), Some(m)) => {
            let trials = load_trials(t)?;
            let manifest = load_manifest(m)?;
            let cohort_ids: Vec<String> = pool.iter().map(|r| r.id.clone()).collect();
            let mut setup = EvalSetup::new(trials, manifest, cohort_ids);
            if let Some(size) = a.cohort_size {
                setup.cohort_size = size;
            }
            setup.as_norm.top_n = a
                .top_n
                .unwrap_or_else(|| st.as_norm_top_n.min(setup.cohort_size));
            setup.d_min_margin = st.qmf_d_min_margin;
            setup.dcf.p_target = st.dcf_p_target;
            setup.seed = st.seed;
            Some(setup)
        }
        _ => {
            return Err(usage(
                "give both --val-trials and --val-manifest, or neither",
            ))
        }
    };

    let ks = match &a.ks {
        Some(s) => parse_ks(s)?,
        None => st.cluster_ks.clone().unwrap_or_default(),
    };
    let cfg = AdaptationConfig {
        rounds: a.rounds.unwrap_or(1),
        round: RoundConfig {
            min_duration: a.min_duration.unwrap_or(1.0),
            normalize: !a.no_normalize,
            ks,
            k_override: a.k,
            seed: st.seed,
            max_iters: a.max_iters.unwrap_or(KMEANS_DEFAULT_MAX_ITERS),
            restarts: a.restarts.unwrap_or(st.cluster_restarts),
        },
    };
    let operator: Box<dyn AdaptationOperator> = match a.operator {
        OperatorKind::Whitening => Box::new(WithinClassWhitening {
            ridge: a.ridge.unwrap_or_else(|| WithinClassWhitening::default().ridge),
        }),
        OperatorKind::Identity => Box::new(IdentityOperator),
    };

    let run = adaptation::run_adaptation(
        &pool,
        &base,
        &cfg,
        operator.as_ref(),
        truth.as_ref(),
        mix.as_ref(),
        eval.as_ref(),
    )?;

    create_dir(&a.out_dir)?;
    for outcome in &run.rounds {
        let dir = a.out_dir.join(format!("round_{}", outcome.report.round));
        create_dir(&dir)?;
        outcome.report.curve.save(&dir.join("curve.tsv"))?;
        save_manifest(&dir.join("pseudo_labels.tsv"), &outcome.pseudo_labels)?;
        save_embeddings(
            &dir.join("embeddings.bin"),
            &outcome.embeddings,
            EmbeddingFormat::Binary,
        )?;
        let t = &outcome.transform;
        let mut text = String::new();
        for i in 0..t.rows() {
            let row: Vec<String> = (0..t.cols())
                .map(|j| format!("{:.6}", t.matrix()[i * t.cols() + j]))
                .collect();
            text.push_str(&row.join("\t"));
            text.push('\n');
        }
        write_atomic(&dir.join("transform.tsv"), text.as_bytes())?;
    }
    let reports: Vec<&RoundReport> = run.rounds.iter().map(|o| &o.report).collect();
    let summary = adaptation::summary_tsv(run.baseline.as_ref(), &reports);
    write_atomic(&a.out_dir.join("summary.tsv"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

#[derive(Args)]
pub struct ManifestAugmentArgs {
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Tempo factors to add, comma-separated
    #[arg(long, default_value = "0.9,1.1")]
    factors: String,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn run_manifest_augment(a: &ManifestAugmentArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&a.manifest)?;
    let mut factors = Vec::new();
    for part in a.factors.split(',') {
        let f: f64 = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad tempo factor '{}'", part.trim())))?;
        factors.push(f);
    }
    let augmented = augment_manifest(&manifest, &factors)?;
    save_manifest(&a.out, &augmented)?;
    eprintln!(
        "{} records in, {} out ({} speakers)",
        manifest.len(),
        augmented.len(),
        augmented.speaker_count()
    );
    Ok(())
}

#[derive(Args)]
pub struct ManifestFilterArgs {
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Drop records at or below this duration; applied before --truncate
    #[arg(long)]
    min_duration: Option<f64>,
    /// Cap every duration at this many seconds
    #[arg(long)]
    truncate: Option<f64>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

fn run_manifest_filter(a: &ManifestFilterArgs) -> Result<(), CliError> {
    if a.min_duration.is_none() && a.truncate.is_none() {
        return Err(usage("give --min-duration, --truncate, or both"));
    }
    let mut manifest = load_manifest(&a.manifest)?;
    if let Some(min) = a.min_duration {
        manifest = filter_short(&manifest, min)?;
    }
    if let Some(cap) = a.truncate {
        manifest = truncate_durations(&manifest, cap)?;
    }
    save_manifest(&a.out, &manifest)?;
    Ok(())
}

#[derive(Args)]
pub struct LossCheckArgs {
    /// Gradient-check cases that must pass hygiene filters
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Sub-centers per class; 1 checks the plain margin loss
    #[arg(long)]
    sub_centers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Angular margin (default from config, 0.2)
    #[arg(long)]
    m: Option<f64>,
    /// Logit scale (default from config, 32)
    #[arg(long)]
    s: Option<f64>,
}

fn run_loss_check(a: &LossCheckArgs, st: &Settings) -> Result<(), CliError> {
    let defaults = GradCheckConfig::default();
    let cfg = GradCheckConfig {
        cases: a.cases.unwrap_or(defaults.cases),
        classes: a.classes.unwrap_or(defaults.classes),
        sub_centers: a.sub_centers.unwrap_or(st.loss_sub_centers),
        dim: a.dim.unwrap_or(defaults.dim),
        margin: a.m.unwrap_or(st.loss_m),
        scale: a.s.unwrap_or(st.loss_s),
        step: defaults.step,
        seed: st.seed,
    };
    let report = finite_difference_check(&cfg)?;
    println!("cases\t{}", report.cases_run);
    println!("candidates\t{}", report.candidates_tried);
    println!("max_rel_embedding\t{:.6e}", report.max_rel_embedding);
    println!("max_rel_weights\t{:.6e}", report.max_rel_weights);
    println!("result\t{}", if report.passed() { "PASS" } else { "FAIL" });
    if !report.passed() {
        return Err(CliError::Data(svb_core::Error::InvalidParameter(format!(
            "gradient check failed: max relative error {:.6e} (embedding), {:.6e} (weights)",
            report.max_rel_embedding, report.max_rel_weights
        ))));
    }
    Ok(())
}

#[derive(Args)]
pub struct SynthGenArgs {
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 10)]
    utts: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Within-speaker spread
    #[arg(long, default_value_t = 0.15)]
    spread: f64,
    /// Length of the shared domain-shift vector
    #[arg(long, default_value_t = 0.4)]
    shift: f64,
    #[arg(long, default_value_t = 2.0)]
    dur_lo: f64,
    #[arg(long, default_value_t = 15.0)]
    dur_hi: f64,
    /// Also write trials.txt with this many target pairs
    #[arg(long)]
    targets: Option<usize>,
    /// Nontarget pairs for trials.txt
    #[arg(long)]
    nontargets: Option<usize>,
    /// Output directory: embeddings.bin, truth.tsv, unlabeled.tsv
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

fn run_synth_gen(a: &SynthGenArgs, st: &Settings) -> Result<(), CliError> {
    let cfg = SynthConfig {
        speakers: a.speakers,
        utterances_per_speaker: a.utts,
        feature_dim: a.dim,
        within_spread: a.spread,
        domain_shift: a.shift,
        duration_range: (a.dur_lo, a.dur_hi),
        seed: st.seed,
    };
    let corpus = generate_corpus(&cfg)?;
    create_dir(&a.out_dir)?;
    save_embeddings(
        &a.out_dir.join("embeddings.bin"),
        &corpus.features,
        EmbeddingFormat::Binary,
    )?;
    save_manifest(&a.out_dir.join("truth.tsv"), &corpus.truth)?;
    save_manifest(&a.out_dir.join("unlabeled.tsv"), &corpus.unlabeled)?;
    match (a.targets, a.nontargets) {
        (None, None) => {}
        (t, n) => {
            let trials = make_trials(&corpus.truth, t.unwrap_or(0), n.unwrap_or(0), st.seed)?;
            save_trials(&a.out_dir.join("trials.txt"), &trials)?;
        }
    }
    Ok(())
}

//! Quality-aware score calibration.
//!
//! Each trial becomes a 4-feature vector: the score itself, one duration
//! term per side, and the embedding-magnitude rate. Duration terms are
//! |ln(d - d_min)| with d_min fixed from the training durations; the
//! magnitude rate is |ln(|z_e| / |z_t|)| over the raw, un-normalized
//! embeddings. A small L2-regularized logistic regression maps features to
//! log-odds; calibrated scores stay on the log-odds scale.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{io::write_atomic, EmbeddingSet, Manifest, ScoreSet, TrialScore};
use crate::error::{Error, Result};

pub const QMF_FEATURE_ORDER: &str = "score,dur_e,dur_t,mag_rate";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QmfFeatures {
    pub score: f64,
    pub dur_e: f64,
    pub dur_t: f64,
    pub mag_rate: f64,
}

impl QmfFeatures {
    fn as_array(&self) -> [f64; 4] {
        [self.score, self.dur_e, self.dur_t, self.mag_rate]
    }

    fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// d_min = min(durations) - margin. Every training duration then sits
/// strictly above d_min, keeping ln(d - d_min) finite.
pub fn compute_d_min(durations: &[f64], margin: f64) -> Result<f64> {
    if durations.is_empty() {
        return Err(Error::EmptyInput("no durations for d_min".into()));
    }
    if !(margin.is_finite() && margin > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "d_min margin must be finite and positive, got {margin}"
        )));
    }
    let mut min = f64::INFINITY;
    for &d in durations {
        if !d.is_finite() {
            return Err(Error::NonFinite {
                context: "durations for d_min".into(),
            });
        }
        min = min.min(d);
    }
    Ok(min - margin)
}

/// d_min over the durations of every utterance referenced by `scores`,
/// both enrollment and test sides.
pub fn d_min_for_scores(scores: &ScoreSet, manifest: &Manifest, margin: f64) -> Result<f64> {
    let mut durations = Vec::new();
    for id in scores.utterance_ids() {
        let r = manifest.get(id).ok_or_else(|| Error::UnknownId {
            id: id.into(),
            context: "duration lookup".into(),
        })?;
        durations.push(r.duration);
    }
    compute_d_min(&durations, margin)
}

fn duration_term(id: &str, d: f64, d_min: f64) -> Result<f64> {
    if d <= d_min {
        return Err(Error::InvalidParameter(format!(
            "utterance '{id}': duration {d} not above d_min {d_min}"
        )));
    }
    Ok((d - d_min).ln().abs())
}

/// Feature vectors for every score entry, aligned by position.
pub fn qmf_features(
    scores: &ScoreSet,
    embeddings: &EmbeddingSet,
    manifest: &Manifest,
    d_min: f64,
) -> Result<Vec<QmfFeatures>> {
    if !d_min.is_finite() {
        return Err(Error::NonFinite {
            context: "d_min".into(),
        });
    }
    let mut out = Vec::with_capacity(scores.len());
    for e in scores.iter() {
        let side = |id: &str| -> Result<(f64, f64)> {
            let rec = manifest.get(id).ok_or_else(|| Error::UnknownId {
                id: id.into(),
                context: "calibration manifest".into(),
            })?;
            let emb = embeddings.get(id).ok_or_else(|| Error::UnknownId {
                id: id.into(),
                context: "calibration embeddings".into(),
            })?;
            let mag = emb.norm();
            if mag == 0.0 {
                return Err(Error::ZeroNorm { id: id.into() });
            }
            Ok((duration_term(id, rec.duration, d_min)?, mag))
        };
        let (dur_e, mag_e) = side(&e.enroll)?;
        let (dur_t, mag_t) = side(&e.test)?;
        out.push(QmfFeatures {
            score: e.score,
            dur_e,
            dur_t,
            mag_rate: (mag_e / mag_t).ln().abs(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CalibrationModel {
    /// Feature weights in QMF_FEATURE_ORDER.
    pub weights: [f64; 4],
    pub bias: f64,
    pub d_min: f64,
    pub feature_order: String,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// L2 penalty on the feature weights; the bias is never penalized.
    pub l2: f64,
    pub max_iters: usize,
    /// Gradient norm below which the fit counts as converged.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            l2: 1e-4,
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

/// Mean logistic log-loss plus (l2/2)|w|^2; the bias is unregularized.
pub fn regularized_loss(
    features: &[QmfFeatures],
    labels: &[bool],
    weights: &[f64; 4],
    bias: f64,
    l2: f64,
) -> f64 {
    let mut total = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        let x = f.as_array();
        let mut z = bias;
        for j in 0..4 {
            z += weights[j] * x[j];
        }
        let y = if y { 1.0 } else { 0.0 };
        // ln(1 + e^z) - y z, computed without overflow.
        total += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
    }
    let mut reg = 0.0;
    for w in weights {
        reg += w * w;
    }
    total / features.len() as f64 + 0.5 * l2 * reg
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Solves a dense symmetric 5x5 system by Gaussian elimination with partial
/// pivoting. Near-singular systems get one diagonal-ridge retry.
fn solve5(a: &[[f64; 5]; 5], b: &[f64; 5]) -> Result<[f64; 5]> {
    fn attempt(a: &[[f64; 5]; 5], b: &[f64; 5]) -> Option<[f64; 5]> {
        let mut m = *a;
        let mut v = *b;
        for col in 0..5 {
            let mut pivot = col;
            for row in col + 1..5 {
                if m[row][col].abs() > m[pivot][col].abs() {
                    pivot = row;
                }
            }
            if m[pivot][col].abs() < 1e-300 {
                return None;
            }
            m.swap(col, pivot);
            v.swap(col, pivot);
            for row in col + 1..5 {
                let f = m[row][col] / m[col][col];
                for k in col..5 {
                    m[row][k] -= f * m[col][k];
                }
                v[row] -= f * v[col];
            }
        }
        let mut x = [0.0; 5];
        for col in (0..5).rev() {
            let mut s = v[col];
            for k in col + 1..5 {
                s -= m[col][k] * x[k];
            }
            x[col] = s / m[col][col];
        }
        if x.iter().all(|v| v.is_finite()) {
            Some(x)
        } else {
            None
        }
    }

    if let Some(x) = attempt(a, b) {
        return Ok(x);
    }
    let mut ridge = *a;
    let scale: f64 = (0..5).map(|i| a[i][i].abs()).sum::<f64>() / 5.0;
    for i in 0..5 {
        ridge[i][i] += 1e-9 * (1.0 + scale);
    }
    attempt(&ridge, b).ok_or_else(|| Error::InvalidParameter("singular Hessian in calibration fit".into()))
}

/// Fits the logistic calibration by damped Newton iterations from zero
/// initialization. Deterministic: no sampling, full-batch updates, loss
/// non-increasing across accepted steps.
pub fn fit_calibration(
    features: &[QmfFeatures],
    labels: &[bool],
    d_min: f64,
    opts: &FitOptions,
) -> Result<CalibrationModel> {
    if features.is_empty() {
        return Err(Error::EmptyInput("no trials to fit calibration on".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Mismatch(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite {
            context: "calibration features".into(),
        });
    }
    if !d_min.is_finite() {
        return Err(Error::NonFinite {
            context: "d_min".into(),
        });
    }
    if !(opts.l2.is_finite() && opts.l2 >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "l2 must be finite and non-negative, got {}",
            opts.l2
        )));
    }
    if opts.max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
    }
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tol must be finite and positive, got {}",
            opts.tol
        )));
    }
    let targets = labels.iter().filter(|&&y| y).count();
    if targets == 0 || targets == labels.len() {
        return Err(Error::SingleClass);
    }

    let n = features.len() as f64;
    // Coordinates 0..4 are feature weights, coordinate 4 is the bias.
    let mut w = [0.0f64; 5];
    let loss_at = |w: &[f64; 5]| {
        let weights = [w[0], w[1], w[2], w[3]];
        regularized_loss(features, labels, &weights, w[4], opts.l2)
    };

    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::NAN;

    for iter in 0..=opts.max_iters {
        let mut grad = [0.0f64; 5];
        let mut hess = [[0.0f64; 5]; 5];
        for (f, &y) in features.iter().zip(labels) {
            let xf = f.as_array();
            let x = [xf[0], xf[1], xf[2], xf[3], 1.0];
            let mut z = 0.0;
            for j in 0..5 {
                z += w[j] * x[j];
            }
            let p = sigmoid(z);
            let r = p - if y { 1.0 } else { 0.0 };
            let q = p * (1.0 - p);
            for j in 0..5 {
                grad[j] += r * x[j];
                for k in 0..5 {
                    hess[j][k] += q * x[j] * x[k];
                }
            }
        }
        for j in 0..5 {
            grad[j] /= n;
            for k in 0..5 {
                hess[j][k] /= n;
            }
        }
        for j in 0..4 {
            grad[j] += opts.l2 * w[j];
            hess[j][j] += opts.l2;
        }

        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        iterations = iter;
        if grad_norm <= opts.tol {
            converged = true;
            break;
        }
        if iter == opts.max_iters {
            break;
        }

        let neg: [f64; 5] = [-grad[0], -grad[1], -grad[2], -grad[3], -grad[4]];
        let delta = solve5(&hess, &neg)?;

        let current = loss_at(&w);
        let mut step = 1.0;
        let mut accepted = false;
        while step >= 1e-12 {
            let mut cand = w;
            for j in 0..5 {
                cand[j] += step * delta[j];
            }
            if loss_at(&cand) <= current {
                w = cand;
                accepted = true;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            break;
        }
    }

    Ok(CalibrationModel {
        weights: [w[0], w[1], w[2], w[3]],
        bias: w[4],
        d_min,
        feature_order: QMF_FEATURE_ORDER.to_string(),
        converged,
        iterations,
        grad_norm,
    })
}

/// Calibrated score = w . features + bias, on the log-odds scale.
pub fn apply_calibration(
    model: &CalibrationModel,
    base: &ScoreSet,
    features: &[QmfFeatures],
) -> Result<ScoreSet> {
    if model.feature_order != QMF_FEATURE_ORDER {
        return Err(Error::Mismatch(format!(
            "model feature order '{}' vs expected '{}'",
            model.feature_order, QMF_FEATURE_ORDER
        )));
    }
    if base.len() != features.len() {
        return Err(Error::Mismatch(format!(
            "{} scores vs {} feature rows",
            base.len(),
            features.len()
        )));
    }
    if model.weights.iter().any(|v| !v.is_finite()) || !model.bias.is_finite() {
        return Err(Error::NonFinite {
            context: "calibration model parameters".into(),
        });
    }
    let mut out = ScoreSet::default();
    for (e, f) in base.iter().zip(features) {
        let x = f.as_array();
        let mut z = model.bias;
        for j in 0..4 {
            z += model.weights[j] * x[j];
        }
        out.push(TrialScore {
            enroll: e.enroll.clone(),
            test: e.test.clone(),
            score: z,
        });
    }
    Ok(out)
}

/// Key=value text, one pair per line. Floats use the shortest
/// representation that parses back to the identical value.
pub fn save_model(path: &Path, model: &CalibrationModel) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "feature_order={}", model.feature_order);
    let _ = writeln!(out, "w_score={}", model.weights[0]);
    let _ = writeln!(out, "w_dur_e={}", model.weights[1]);
    let _ = writeln!(out, "w_dur_t={}", model.weights[2]);
    let _ = writeln!(out, "w_mag_rate={}", model.weights[3]);
    let _ = writeln!(out, "bias={}", model.bias);
    let _ = writeln!(out, "d_min={}", model.d_min);
    let _ = writeln!(out, "converged={}", model.converged);
    let _ = writeln!(out, "iterations={}", model.iterations);
    let _ = writeln!(out, "grad_norm={}", model.grad_norm);
    write_atomic(path, out.as_bytes())
}

pub fn load_model(path: &Path) -> Result<CalibrationModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut model = CalibrationModel {
        weights: [f64::NAN; 4],
        bias: f64::NAN,
        d_min: f64::NAN,
        feature_order: String::new(),
        converged: false,
        iterations: 0,
        grad_norm: f64::NAN,
    };
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, lineno, "expected key=value"))?;
        if !seen.insert(key.to_string()) {
            return Err(Error::parse(path, lineno, format!("duplicate key '{key}'")));
        }
        let fval = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad float '{value}'")))
        };
        match key {
            "feature_order" => model.feature_order = value.to_string(),
            "w_score" => model.weights[0] = fval()?,
            "w_dur_e" => model.weights[1] = fval()?,
            "w_dur_t" => model.weights[2] = fval()?,
            "w_mag_rate" => model.weights[3] = fval()?,
            "bias" => model.bias = fval()?,
            "d_min" => model.d_min = fval()?,
            "converged" => {
                model.converged = value
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad bool '{value}'")))?
            }
            "iterations" => {
                model.iterations = value
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad integer '{value}'")))?
            }
            "grad_norm" => model.grad_norm = fval()?,
            other => {
                return Err(Error::parse(path, lineno, format!("unknown key '{other}'")));
            }
        }
    }
    if model.feature_order.is_empty() {
        return Err(Error::MalformedHeader {
            path: path.into(),
            msg: "missing feature_order".into(),
        });
    }
    if model.feature_order != QMF_FEATURE_ORDER {
        return Err(Error::Mismatch(format!(
            "model feature order '{}' vs expected '{}'",
            model.feature_order, QMF_FEATURE_ORDER
        )));
    }
    if model.weights.iter().any(|v| v.is_nan()) || model.bias.is_nan() || model.d_min.is_nan() {
        return Err(Error::MalformedHeader {
            path: path.into(),
            msg: "missing one of w_*, bias, d_min".into(),
        });
    }
    Ok(model)
}

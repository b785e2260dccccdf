//! Additive angular margin losses over cosine logits, with analytic
//! gradients for both the embedding and the weight matrix.
//!
//! Logits are s * cos(theta_j); the target class gets s * cos(theta_y + m),
//! computed algebraically as c * cos(m) - sqrt(1 - c^2) * sin(m) on the
//! clamped cosine c. When theta_y + m would pass pi (c <= -cos(m)) the
//! target logit falls back to the linear form cos(theta_y) - m * sin(m),
//! which keeps the penalty monotone instead of wrapping around.
//!
//! The multi-center variant keeps several weight vectors per class and
//! scores each class by its best-matching center; gradients flow only
//! through that argmax center.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeding;

/// Cosine clamp bound: |c| <= 1 - CLAMP_EPS before the angular transform.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct MarginHead {
    classes: usize,
    sub_centers: usize,
    dim: usize,
    /// Flat weights: center (c, j) occupies
    /// [(c * sub_centers + j) * dim .. +dim]. Each center is unit-norm
    /// within 1e-6.
    weights: Vec<f64>,
    margin: f64,
    scale: f64,
}

impl MarginHead {
    pub fn new(
        classes: usize,
        sub_centers: usize,
        dim: usize,
        weights: Vec<f64>,
        margin: f64,
        scale: f64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if sub_centers == 0 {
            return Err(Error::InvalidParameter("sub_centers must be at least 1".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("weight dimension 0".into()));
        }
        if weights.len() != classes * sub_centers * dim {
            return Err(Error::Mismatch(format!(
                "{} weight values vs {} x {} x {} expected",
                weights.len(),
                classes,
                sub_centers,
                dim
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                context: "margin head weights".into(),
            });
        }
        for c in 0..classes {
            for j in 0..sub_centers {
                let o = (c * sub_centers + j) * dim;
                let norm = weights[o..o + dim].iter().map(|w| w * w).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidParameter(format!(
                        "weight center ({c}, {j}) has norm {norm}; centers must be unit-norm"
                    )));
                }
            }
        }
        check_margin_scale(margin, scale)?;
        Ok(MarginHead {
            classes,
            sub_centers,
            dim,
            weights,
            margin,
            scale,
        })
    }

    /// Unit-normalized Gaussian centers from one seed.
    pub fn random(
        classes: usize,
        sub_centers: usize,
        dim: usize,
        margin: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seeding::rng(seed);
        let weights = random_unit_centers(classes * sub_centers, dim, &mut rng)?;
        MarginHead::new(classes, sub_centers, dim, weights, margin, scale)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sub_centers(&self) -> usize {
        self.sub_centers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn forward(&self, embedding: &[f64], label: usize) -> Result<LossResult> {
        forward_raw(
            self.classes,
            self.sub_centers,
            self.dim,
            &self.weights,
            self.margin,
            self.scale,
            embedding,
            label,
        )
    }
}

fn check_margin_scale(margin: f64, scale: f64) -> Result<()> {
    if !(margin.is_finite() && (0.0..std::f64::consts::PI).contains(&margin)) {
        return Err(Error::InvalidParameter(format!(
            "margin must lie in [0, pi), got {margin}"
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "scale must be finite and positive, got {scale}"
        )));
    }
    Ok(())
}

fn random_unit_centers(count: usize, dim: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut weights = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm {
                id: "<random center>".into(),
            });
        }
        weights.extend(v.iter().map(|x| x / norm));
    }
    Ok(weights)
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub loss: f64,
    /// d loss / d embedding.
    pub grad_embedding: Vec<f64>,
    /// d loss / d weights, same flat layout as `MarginHead::weights`.
    /// Non-selected centers of a class hold exact zeros.
    pub grad_weights: Vec<f64>,
    /// Post-margin softmax probabilities per class.
    pub probabilities: Vec<f64>,
}

/// Single-center head only.
pub fn arcface_loss(head: &MarginHead, embedding: &[f64], label: usize) -> Result<LossResult> {
    if head.sub_centers != 1 {
        return Err(Error::InvalidParameter(format!(
            "single-center loss on a head with {} centers per class",
            head.sub_centers
        )));
    }
    head.forward(embedding, label)
}

pub fn subcenter_arcface_loss(
    head: &MarginHead,
    embedding: &[f64],
    label: usize,
) -> Result<LossResult> {
    head.forward(embedding, label)
}

#[allow(clippy::too_many_arguments)]
fn forward_raw(
    classes: usize,
    sub_centers: usize,
    dim: usize,
    weights: &[f64],
    margin: f64,
    scale: f64,
    x: &[f64],
    label: usize,
) -> Result<LossResult> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            id: "<embedding>".into(),
            expected: dim,
            got: x.len(),
        });
    }
    if label >= classes {
        return Err(Error::InvalidParameter(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "embedding".into(),
        });
    }
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if xn == 0.0 {
        return Err(Error::ZeroNorm {
            id: "<embedding>".into(),
        });
    }

    // Per class: best center's cosine, index, norm.
    let mut cos = vec![0.0f64; classes];
    let mut pick = vec![0usize; classes];
    let mut pick_norm = vec![0.0f64; classes];
    for c in 0..classes {
        let mut best_j = 0;
        let mut best_cos = f64::NEG_INFINITY;
        let mut best_norm = 0.0;
        for j in 0..sub_centers {
            let o = (c * sub_centers + j) * dim;
            let w = &weights[o..o + dim];
            let mut dot = 0.0;
            let mut wn2 = 0.0;
            for i in 0..dim {
                dot += w[i] * x[i];
                wn2 += w[i] * w[i];
            }
            let wn = wn2.sqrt();
            if wn == 0.0 {
                return Err(Error::ZeroNorm {
                    id: format!("<weight center ({c}, {j})>"),
                });
            }
            let cs = dot / (wn * xn);
            if cs > best_cos {
                best_cos = cs;
                best_j = j;
                best_norm = wn;
            }
        }
        cos[c] = best_cos;
        pick[c] = best_j;
        pick_norm[c] = best_norm;
    }

    let cos_m = margin.cos();
    let sin_m = margin.sin();
    let c_raw = cos[label];
    let c_hat = c_raw.clamp(-1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS);
    let clamped = c_raw != c_hat;
    let (target, dtarget_dcos) = if c_hat > -cos_m {
        let sin_y = (1.0 - c_hat * c_hat).sqrt();
        let t = c_hat * cos_m - sin_y * sin_m;
        let dt = if clamped {
            0.0
        } else {
            cos_m + c_hat * sin_m / sin_y
        };
        (t, dt)
    } else {
        (c_raw - margin * sin_m, 1.0)
    };

    let mut logits = vec![0.0f64; classes];
    for c in 0..classes {
        logits[c] = scale * if c == label { target } else { cos[c] };
    }
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probabilities: Vec<f64> = exps.iter().map(|&e| e / z).collect();
    let loss = z.ln() - (logits[label] - mx);

    let mut grad_embedding = vec![0.0f64; dim];
    let mut grad_weights = vec![0.0f64; weights.len()];
    for c in 0..classes {
        let dlogit = probabilities[c] - if c == label { 1.0 } else { 0.0 };
        let dcos = scale * dlogit * if c == label { dtarget_dcos } else { 1.0 };
        let o = (c * sub_centers + pick[c]) * dim;
        let w = &weights[o..o + dim];
        let wn = pick_norm[c];
        let cs = cos[c];
        for i in 0..dim {
            grad_embedding[i] += dcos * (w[i] / (wn * xn) - cs * x[i] / (xn * xn));
            grad_weights[o + i] = dcos * (x[i] / (xn * wn) - cs * w[i] / (wn * wn));
        }
    }

    Ok(LossResult {
        loss,
        grad_embedding,
        grad_weights,
        probabilities,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingStage {
    Pretrain,
    LargeMarginFineTune,
}

/// (margin, scale) per stage: (0.2, 32) for pretraining, (0.5, 32) for
/// large-margin fine-tuning.
pub fn margin_schedule(stage: TrainingStage) -> (f64, f64) {
    match stage {
        TrainingStage::Pretrain => (0.2, 32.0),
        TrainingStage::LargeMarginFineTune => (0.5, 32.0),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub cases: usize,
    pub classes: usize,
    pub sub_centers: usize,
    pub dim: usize,
    pub margin: f64,
    pub scale: f64,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            cases: 100,
            classes: 4,
            sub_centers: 3,
            dim: 8,
            margin: 0.2,
            scale: 32.0,
            step: 1e-5,
            seed: 42,
        }
    }
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub cases_run: usize,
    pub candidates_tried: usize,
    pub max_rel_embedding: f64,
    pub max_rel_weights: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_embedding <= GRAD_CHECK_TOLERANCE
            && self.max_rel_weights <= GRAD_CHECK_TOLERANCE
    }
}

/// Central finite differences against the analytic gradients over seeded
/// random cases. Candidates too close to a non-differentiable boundary
/// (cosine clamp, margin fallback branch, center argmax tie, saturated
/// softmax) are skipped; `cases` counts the accepted ones.
pub fn finite_difference_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.cases == 0 {
        return Err(Error::InvalidParameter("grad check needs at least 1 case".into()));
    }
    if !(cfg.step.is_finite() && cfg.step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "step must be finite and positive, got {}",
            cfg.step
        )));
    }
    check_margin_scale(cfg.margin, cfg.scale)?;
    if cfg.classes < 2 || cfg.sub_centers == 0 || cfg.dim == 0 {
        return Err(Error::InvalidParameter(
            "grad check needs classes >= 2, sub_centers >= 1, dim >= 1".into(),
        ));
    }

    let mut max_rel_emb = 0.0f64;
    let mut max_rel_w = 0.0f64;
    let mut accepted = 0usize;
    let mut candidate = 0usize;
    let budget = cfg.cases.saturating_mul(100);

    while accepted < cfg.cases {
        if candidate >= budget {
            return Err(Error::InvalidParameter(format!(
                "only {accepted} of {} grad-check cases passed the hygiene filters",
                cfg.cases
            )));
        }
        let mut rng = seeding::rng(seeding::derive(cfg.seed, candidate as u64));
        candidate += 1;

        let weights = random_unit_centers(cfg.classes * cfg.sub_centers, cfg.dim, &mut rng)?;
        let mag: f64 = rng.random_range(0.5..2.0);
        let x: Vec<f64> = (0..cfg.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * mag)
            .collect();
        let label = rng.random_range(0..cfg.classes);

        let base = forward_raw(
            cfg.classes,
            cfg.sub_centers,
            cfg.dim,
            &weights,
            cfg.margin,
            cfg.scale,
            &x,
            label,
        )?;
        if !case_is_well_conditioned(cfg, &weights, &x, label, &base) {
            continue;
        }
        accepted += 1;

        let loss_of = |w: &[f64], xv: &[f64]| -> f64 {
            forward_raw(
                cfg.classes,
                cfg.sub_centers,
                cfg.dim,
                w,
                cfg.margin,
                cfg.scale,
                xv,
                label,
            )
            .expect("perturbed case stays valid")
            .loss
        };

        let mut fd_emb = vec![0.0f64; cfg.dim];
        for i in 0..cfg.dim {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += cfg.step;
            minus[i] -= cfg.step;
            fd_emb[i] = (loss_of(&weights, &plus) - loss_of(&weights, &minus)) / (2.0 * cfg.step);
        }
        max_rel_emb = max_rel_emb.max(relative_error(&base.grad_embedding, &fd_emb));

        let mut fd_w = vec![0.0f64; weights.len()];
        for i in 0..weights.len() {
            let mut plus = weights.clone();
            let mut minus = weights.clone();
            plus[i] += cfg.step;
            minus[i] -= cfg.step;
            fd_w[i] = (loss_of(&plus, &x) - loss_of(&minus, &x)) / (2.0 * cfg.step);
        }
        max_rel_w = max_rel_w.max(relative_error(&base.grad_weights, &fd_w));
    }

    Ok(GradCheckReport {
        cases_run: accepted,
        candidates_tried: candidate,
        max_rel_embedding: max_rel_emb,
        max_rel_weights: max_rel_w,
    })
}

fn case_is_well_conditioned(
    cfg: &GradCheckConfig,
    weights: &[f64],
    x: &[f64],
    label: usize,
    base: &LossResult,
) -> bool {
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut cosines = vec![Vec::with_capacity(cfg.sub_centers); cfg.classes];
    for c in 0..cfg.classes {
        for j in 0..cfg.sub_centers {
            let o = (c * cfg.sub_centers + j) * cfg.dim;
            let w = &weights[o..o + cfg.dim];
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            cosines[c].push(dot / (wn * xn));
        }
    }
    for per_class in &cosines {
        for &cs in per_class {
            if cs.abs() > 0.99 {
                return false;
            }
        }
        if cfg.sub_centers > 1 {
            let mut sorted = per_class.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] < 1e-3 {
                return false;
            }
        }
    }
    let p_y = base.probabilities[label];
    if !(1e-4..=1.0 - 1e-4).contains(&p_y) {
        return false;
    }
    if cfg.margin > 0.0 {
        let best = cosines[label]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if (best - (-cfg.margin.cos())).abs() < 1e-3 {
            return false;
        }
    }
    true
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let num = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0f64, f64::max);
    let amax = analytic.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    let nmax = numeric.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    num / amax.max(nmax).max(1e-8)
}

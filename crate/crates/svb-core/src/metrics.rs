//! Detection error tradeoff, equal error rate, and detection cost.
//!
//! Decision rule everywhere: accept iff score >= threshold. The DET curve
//! has one operating point per distinct score plus endpoints at -inf
//! (accept all) and +inf (reject all), so every achievable (p_miss, p_fa)
//! pair appears exactly once.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DetCurve {
    pub thresholds: Vec<f64>,
    pub p_miss: Vec<f64>,
    pub p_fa: Vec<f64>,
}

impl DetCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Three tab-separated columns: threshold, p_miss, p_fa. Endpoint
    /// thresholds print as `-inf` / `inf`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            let t = self.thresholds[i];
            let t_str = if t == f64::NEG_INFINITY {
                "-inf".to_string()
            } else if t == f64::INFINITY {
                "inf".to_string()
            } else {
                format!("{t:.6}")
            };
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\n",
                t_str, self.p_miss[i], self.p_fa[i]
            ));
        }
        out
    }
}

/// Parameters of the normalized detection cost function.
#[derive(Debug, Clone, Copy)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target.is_finite() && self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "p_target must be in (0, 1), got {}",
                self.p_target
            )));
        }
        for (name, v) in [("c_miss", self.c_miss), ("c_fa", self.c_fa)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Mismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("no labeled trials".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "trial scores".into(),
        });
    }
    let targets = labels.iter().filter(|&&l| l).count();
    let nontargets = labels.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(Error::SingleClass);
    }
    Ok((targets, nontargets))
}

pub fn det_curve(scores: &[f64], labels: &[bool]) -> Result<DetCurve> {
    let (n_target, n_nontarget) = check_inputs(scores, labels)?;

    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    let mut thresholds = vec![f64::NEG_INFINITY];
    let mut p_miss = vec![0.0];
    let mut p_fa = vec![1.0];

    // At threshold v: misses are targets strictly below v, false accepts are
    // nontargets at or above v.
    let mut targets_below = 0usize;
    let mut nontargets_below = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        thresholds.push(v);
        p_miss.push(targets_below as f64 / n_target as f64);
        p_fa.push((n_nontarget - nontargets_below) as f64 / n_nontarget as f64);
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }

    thresholds.push(f64::INFINITY);
    p_miss.push(1.0);
    p_fa.push(0.0);

    Ok(DetCurve {
        thresholds,
        p_miss,
        p_fa,
    })
}

/// Equal error rate in [0, 1].
///
/// Scans the DET curve for the sign change of p_miss - p_fa. An exact zero
/// is resolved as the midpoint of the maximal run of zero-difference points;
/// otherwise the crossing is linearly interpolated between the bracketing
/// points.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let curve = det_curve(scores, labels)?;
    eer_from_curve(&curve)
}

pub fn eer_from_curve(curve: &DetCurve) -> Result<f64> {
    let diff: Vec<f64> = curve
        .p_miss
        .iter()
        .zip(&curve.p_fa)
        .map(|(m, f)| m - f)
        .collect();
    let first = diff
        .iter()
        .position(|&d| d >= 0.0)
        .ok_or_else(|| Error::InvalidParameter("DET curve never crosses p_miss = p_fa".into()))?;

    if diff[first] == 0.0 {
        let mut last = first;
        while last + 1 < diff.len() && diff[last + 1] == 0.0 {
            last += 1;
        }
        return Ok((curve.p_miss[first] + curve.p_miss[last]) / 2.0);
    }

    // first > 0 because the -inf endpoint has diff = -1.
    let (d0, d1) = (diff[first - 1], diff[first]);
    let t = -d0 / (d1 - d0);
    Ok(curve.p_miss[first - 1] + t * (curve.p_miss[first] - curve.p_miss[first - 1]))
}

/// Minimum normalized detection cost over all curve thresholds:
/// min over t of (c_miss p_t p_miss + c_fa (1 - p_t) p_fa), divided by
/// min(c_miss p_t, c_fa (1 - p_t)). Always in [0, 1] because the reject-all
/// and accept-all endpoints are candidate operating points.
pub fn min_dcf(scores: &[f64], labels: &[bool], params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let curve = det_curve(scores, labels)?;
    min_dcf_from_curve(&curve, params)
}

pub fn min_dcf_from_curve(curve: &DetCurve, params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let miss_weight = params.c_miss * params.p_target;
    let fa_weight = params.c_fa * (1.0 - params.p_target);
    let mut best = f64::INFINITY;
    for i in 0..curve.len() {
        let dcf = miss_weight * curve.p_miss[i] + fa_weight * curve.p_fa[i];
        if dcf < best {
            best = dcf;
        }
    }
    Ok(best / miss_weight.min(fa_weight))
}

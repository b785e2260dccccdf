//! K-means pseudo-labeling: Lloyd iterations with D^2-weighted seeding,
//! SSE-vs-K sweeps, and knee detection on the resulting curve.
//!
//! Determinism contract: one u64 seed fixes seeding, restarts, and the
//! winning run. Ties always break toward the lower index (cluster, sample,
//! restart, or K). Parallelism only maps per-sample work; every reduction
//! runs sequentially in sample order.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{io::write_atomic, EmbeddingSet, Manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per sample, in embedding-set order.
    pub assignments: Vec<usize>,
    /// Sum of squared distances of samples to their assigned centroids.
    pub sse: f64,
    /// Lloyd iterations of the winning restart.
    pub iterations: usize,
    pub converged: bool,
    /// SSE after the initial assignment and after each iteration;
    /// non-increasing within the run.
    pub sse_trace: Vec<f64>,
}

pub const KMEANS_DEFAULT_MAX_ITERS: usize = 100;
pub const KMEANS_DEFAULT_RESTARTS: usize = 3;
const REL_SSE_TOL: f64 = 1e-6;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// Sum of squared distances for an explicit (centroids, assignments) pair,
/// accumulated in sample order. This is the reference evaluation the `sse`
/// field of `Clustering` must reproduce.
pub fn sse(set: &EmbeddingSet, centroids: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    if assignments.len() != set.len() {
        return Err(Error::Mismatch(format!(
            "{} assignments vs {} samples",
            assignments.len(),
            set.len()
        )));
    }
    if centroids.is_empty() {
        return Err(Error::EmptyInput("no centroids".into()));
    }
    for c in centroids {
        if c.len() != set.dim() {
            return Err(Error::Mismatch(format!(
                "centroid dimension {} vs sample dimension {}",
                c.len(),
                set.dim()
            )));
        }
    }
    let mut total = 0.0;
    for (e, &a) in set.iter().zip(assignments) {
        let c = centroids.get(a).ok_or_else(|| {
            Error::InvalidParameter(format!("assignment {a} out of range for {} clusters", centroids.len()))
        })?;
        total += squared_distance(&e.vector, c);
    }
    Ok(total)
}

fn kmeanspp_init(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut min_d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, points[first]))
        .collect();

    while centroids.len() < k {
        let total: f64 = min_d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can push u past the final partial sum.
            pick.unwrap_or_else(|| {
                min_d2
                    .iter()
                    .rposition(|&d| d > 0.0)
                    .expect("total > 0 implies a positive entry")
            })
        } else {
            // Remaining points coincide with chosen centroids.
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[next] = true;
        centroids.push(points[next].to_vec());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, points[next]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    centroids
}

/// Nearest centroid per point; ties go to the lower cluster index.
fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let pairs: Vec<(usize, f64)> = points
        .par_iter()
        .map(|p| {
            let mut best = 0usize;
            let mut best_d = squared_distance(p, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = squared_distance(p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            (best, best_d)
        })
        .collect();
    let mut assignments = Vec::with_capacity(points.len());
    let mut dists = Vec::with_capacity(points.len());
    for (a, d) in pairs {
        assignments.push(a);
        dists.push(d);
    }
    (assignments, dists)
}

/// Re-seats each empty cluster on the point farthest from its assigned
/// centroid, drawn from clusters that keep at least one member. The moved
/// point's distance drops to zero, so total SSE never increases.
fn repair_empty(
    points: &[&[f64]],
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
    dists: &mut [f64],
) -> bool {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut repaired = false;
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        for (i, &a) in assignments.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            match donor {
                Some(best) if dists[i] <= dists[best] => {}
                _ => donor = Some(i),
            }
        }
        let donor = donor.expect("some cluster has at least 2 members while another is empty");
        sizes[assignments[donor]] -= 1;
        centroids[empty] = points[donor].to_vec();
        assignments[donor] = empty;
        sizes[empty] = 1;
        dists[donor] = 0.0;
        repaired = true;
    }
    repaired
}

fn update(points: &[&[f64]], k: usize, dim: usize, assignments: &[usize]) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
        counts[a] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        debug_assert!(c > 0, "update after repair sees no empty clusters");
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

fn lloyd_run(points: &[&[f64]], k: usize, dim: usize, seed: u64, max_iters: usize) -> Clustering {
    let mut rng = seeding::rng(seed);
    let mut centroids = kmeanspp_init(points, k, &mut rng);
    let (mut assignments, mut dists) = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut assignments, &mut dists);

    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        centroids = update(points, k, dim, &assignments);
        let (mut new_assignments, mut new_dists) = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut new_assignments, &mut new_dists);
        iterations += 1;
        let sse_new: f64 = new_dists.iter().sum();
        let sse_prev = *trace.last().unwrap();
        trace.push(sse_new);

        let same = new_assignments == assignments;
        assignments = new_assignments;
        dists = new_dists;
        if same {
            converged = true;
            break;
        }
        if sse_prev == 0.0 || (sse_prev - sse_new) / sse_prev < REL_SSE_TOL {
            converged = true;
            break;
        }
    }

    Clustering {
        centroids,
        assignments,
        sse: dists.iter().sum(),
        iterations,
        converged,
        sse_trace: trace,
    }
}

/// K-means with `restarts` independently seeded runs; the lowest final SSE
/// wins, earlier restart on exact ties.
pub fn kmeans(
    set: &EmbeddingSet,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<Clustering> {
    if set.is_empty() {
        return Err(Error::EmptyInput("no samples to cluster".into()));
    }
    if k == 0 || k > set.len() {
        return Err(Error::InvalidParameter(format!(
            "k must be in 1..={}, got {k}",
            set.len()
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
    }
    if restarts == 0 {
        return Err(Error::InvalidParameter("restarts must be at least 1".into()));
    }

    let points: Vec<&[f64]> = set.iter().map(|e| e.vector.as_slice()).collect();
    let dim = set.dim();
    let mut best: Option<Clustering> = None;
    for r in 0..restarts {
        let run = lloyd_run(&points, k, dim, seeding::derive(seed, r as u64), max_iters);
        let better = match &best {
            None => true,
            Some(b) => run.sse < b.sse,
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// SSE as a function of K.
#[derive(Debug, Clone, PartialEq)]
pub struct SseCurve {
    points: Vec<(usize, f64)>,
}

impl SseCurve {
    /// Ks must be strictly increasing and SSE values finite and
    /// non-negative.
    pub fn new(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("empty SSE curve".into()));
        }
        for (i, &(k, s)) in points.iter().enumerate() {
            if k == 0 {
                return Err(Error::InvalidParameter("curve contains K = 0".into()));
            }
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "SSE at K = {k} must be finite and non-negative, got {s}"
                )));
            }
            if i > 0 && points[i - 1].0 >= k {
                return Err(Error::InvalidParameter(format!(
                    "curve Ks must be strictly increasing, got {} then {k}",
                    points[i - 1].0
                )));
            }
        }
        Ok(SseCurve { points })
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains_k(&self, k: usize) -> bool {
        self.points.iter().any(|&(pk, _)| pk == k)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for &(k, s) in &self.points {
            out.push_str(&format!("{k}\t{s:.6}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(kf), Some(sf), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::parse(path, lineno, "expected 'K SSE'"));
            };
            let k: usize = kf
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad K '{kf}'")))?;
            let s: f64 = sf
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad SSE '{sf}'")))?;
            points.push((k, s));
        }
        SseCurve::new(points).map_err(|e| match e {
            Error::InvalidParameter(msg) => Error::parse(path, 0, msg),
            other => other,
        })
    }
}

/// Runs k-means once per K and collects final SSE values. Each K gets its
/// own derived seed, so single-K reruns reproduce the curve entry exactly.
pub fn sse_curve(
    set: &EmbeddingSet,
    ks: &[usize],
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<SseCurve> {
    if ks.is_empty() {
        return Err(Error::EmptyInput("no K values".into()));
    }
    for (i, &k) in ks.iter().enumerate() {
        if i > 0 && ks[i - 1] >= k {
            return Err(Error::InvalidParameter(format!(
                "K values must be strictly increasing, got {} then {k}",
                ks[i - 1]
            )));
        }
    }
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let c = kmeans(set, k, curve_seed(seed, k), max_iters, restarts)?;
        points.push((k, c.sse));
    }
    SseCurve::new(points)
}

/// Seed used for the K-specific run inside an SSE sweep.
pub fn curve_seed(seed: u64, k: usize) -> u64 {
    seeding::derive(seed, 0x5EED_0000 + k as u64)
}

#[derive(Debug, Clone, Copy)]
pub struct ElbowResult {
    pub k: usize,
    /// Perpendicular distance of the chosen point to the chord, after
    /// min-max normalizing both axes.
    pub max_distance: f64,
    /// True when no interior point stands off the chord; `k` then falls
    /// back to the smallest interior K.
    pub degenerate: bool,
}

/// Knee of the SSE curve: the interior point with maximum perpendicular
/// distance to the chord between the first and last points, both axes
/// min-max normalized first. Ties take the smaller K.
pub fn detect_elbow(curve: &SseCurve) -> Result<ElbowResult> {
    let pts = curve.points();
    if pts.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "elbow detection needs at least 3 curve points, got {}",
            pts.len()
        )));
    }
    let s_min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let s_max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if s_max == s_min {
        return Err(Error::InvalidParameter(
            "flat SSE curve: every K has the same SSE".into(),
        ));
    }
    let k_min = pts[0].0 as f64;
    let k_max = pts[pts.len() - 1].0 as f64;

    let norm: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(k, s)| ((k as f64 - k_min) / (k_max - k_min), (s - s_min) / (s_max - s_min)))
        .collect();
    let (x0, y0) = norm[0];
    let (x1, y1) = *norm.last().unwrap();
    let chord_len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();

    let mut best_i = 1;
    let mut best_d = -1.0;
    for (i, &(x, y)) in norm.iter().enumerate().take(norm.len() - 1).skip(1) {
        let d = ((y1 - y0) * x - (x1 - x0) * y + x1 * y0 - y1 * x0).abs() / chord_len;
        if d > best_d {
            best_d = d;
            best_i = i;
        }
    }

    if best_d < 1e-9 {
        return Ok(ElbowResult {
            k: pts[1].0,
            max_distance: best_d,
            degenerate: true,
        });
    }
    Ok(ElbowResult {
        k: pts[best_i].0,
        max_distance: best_d,
        degenerate: false,
    })
}

/// Manifest with cluster indices as speaker labels: cluster j becomes
/// `pseudo_j`. With a source manifest, duration, tempo, and tags carry over
/// from the matching record; otherwise duration defaults to 1 second.
pub fn assign_pseudo_labels(
    set: &EmbeddingSet,
    clustering: &Clustering,
    source: Option<&Manifest>,
) -> Result<Manifest> {
    if clustering.assignments.len() != set.len() {
        return Err(Error::Mismatch(format!(
            "{} assignments vs {} embeddings",
            clustering.assignments.len(),
            set.len()
        )));
    }
    let mut out = Manifest::new();
    for (e, &a) in set.iter().zip(&clustering.assignments) {
        let label = format!("pseudo_{a}");
        let record = match source {
            Some(m) => {
                let r = m.get(&e.id).ok_or_else(|| Error::UnknownId {
                    id: e.id.clone(),
                    context: "pseudo-label source manifest".into(),
                })?;
                ManifestRecord {
                    speaker: Some(label),
                    ..r.clone()
                }
            }
            None => ManifestRecord::new(e.id.clone(), Some(label), 1.0),
        };
        out.push(record)?;
    }
    Ok(out)
}

/// Fraction of samples whose cluster's majority true speaker matches their
/// own: sum over clusters of the majority class size, divided by N.
pub fn cluster_purity(pseudo: &Manifest, truth: &Manifest) -> Result<f64> {
    if pseudo.is_empty() {
        return Err(Error::EmptyInput("empty pseudo-label manifest".into()));
    }
    if pseudo.len() != truth.len() {
        return Err(Error::Mismatch(format!(
            "{} pseudo-labeled records vs {} truth records",
            pseudo.len(),
            truth.len()
        )));
    }
    // cluster label -> true label -> count, in first-appearance order.
    let mut cluster_ix: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut counts: Vec<std::collections::HashMap<&str, usize>> = Vec::new();
    for rec in pseudo.iter() {
        let t = truth.get(&rec.id).ok_or_else(|| Error::UnknownId {
            id: rec.id.clone(),
            context: "truth manifest".into(),
        })?;
        let cluster = rec.speaker.as_deref().ok_or_else(|| {
            Error::InvalidParameter(format!("record '{}' has no pseudo label", rec.id))
        })?;
        let label = t.speaker.as_deref().ok_or_else(|| {
            Error::InvalidParameter(format!("truth record '{}' has no speaker label", rec.id))
        })?;
        let ix = *cluster_ix.entry(cluster).or_insert_with(|| {
            counts.push(std::collections::HashMap::new());
            counts.len() - 1
        });
        *counts[ix].entry(label).or_insert(0) += 1;
    }
    let mut majority_total = 0usize;
    for c in &counts {
        majority_total += c.values().copied().max().unwrap_or(0);
    }
    Ok(majority_total as f64 / pseudo.len() as f64)
}

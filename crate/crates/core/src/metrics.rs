//! Matching scores and verification / identification statistics.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::GaussianEmbedding;
use crate::error::{ensure_len, DulError, Result};
use crate::linalg::{dot, norm, Matrix};

/// Default FPR interval for [`RocReport::interval_auc`].
pub const AUC_INTERVAL: (f64, f64) = (1e-5, 1e-3);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub score: f64,
    pub genuine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    /// Operating points sorted by FPR, TPR max-enveloped.
    pub points: Vec<RocPoint>,
    pub tpr_at: Vec<TprAtFpr>,
    pub interval_auc: f64,
}

impl RocReport {
    pub fn tpr_at(&self, target_fpr: f64) -> f64 {
        tpr_at_fpr(&self.points, target_fpr)
    }

    /// `fpr,tpr` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.fpr, p.tpr);
        }
        out
    }
}

/// Similarity metric between two embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Cosine,
    Mls,
}

impl Metric {
    /// Floating-point operations spent scoring one pair of `dim`-vectors.
    ///
    /// Cosine: two dot products plus one norm (3 mul-adds per dim) and a
    /// constant tail. MLS: per dim one add for the variance sum, one
    /// sub, one square, one divide, one log, two accumulates.
    pub fn flops(self, dim: usize) -> usize {
        match self {
            Metric::Cosine => 6 * dim + 3,
            Metric::Mls => 2 * dim + 7 * dim + 3,
        }
    }
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_len("cosine operand", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(DulError::ZeroNorm("cosine operand"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mutual likelihood score `log p(z1 = z2)` of two diagonal Gaussians:
/// `-1/2 sum_l [(mu1 - mu2)^2 / (s1^2 + s2^2) + ln(s1^2 + s2^2)] - D/2 ln 2pi`.
pub fn mls_score(g1: &GaussianEmbedding, g2: &GaussianEmbedding) -> Result<f64> {
    mls_terms(g1.mu(), g1.sigma(), g2.mu(), g2.sigma())
}

/// Slice form of [`mls_score`].
pub fn mls_terms(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    ensure_len("mls mu", d, mu2.len())?;
    ensure_len("mls sigma", d, sigma1.len())?;
    ensure_len("mls sigma", d, sigma2.len())?;
    let mut acc = 0.0;
    for l in 0..d {
        let (s1, s2) = (sigma1[l], sigma2[l]);
        if !(s1 > 0.0 && s2 > 0.0) {
            return Err(DulError::Contract("mls requires sigma > 0".into()));
        }
        let var = s1 * s1 + s2 * s2;
        let diff = mu1[l] - mu2[l];
        acc += diff * diff / var + var.ln();
    }
    Ok(-0.5 * acc - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Largest TPR among operating points with FPR at most `target`.
fn tpr_at_fpr(points: &[RocPoint], target: f64) -> f64 {
    points
        .iter()
        .take_while(|p| p.fpr <= target)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// ROC over every distinct score threshold (accept iff `score >= t`).
///
/// `tpr_at` uses the "FPR <= target" rule. `interval_auc` is the area under
/// the resulting TPR step curve over `log10(FPR)` on `interval`, divided by
/// the interval's log-width.
pub fn roc(pairs: &[ScorePair], targets: &[f64]) -> Result<RocReport> {
    roc_with_interval(pairs, targets, AUC_INTERVAL)
}

pub fn roc_with_interval(pairs: &[ScorePair], targets: &[f64], interval: (f64, f64)) -> Result<RocReport> {
    let genuine = pairs.iter().filter(|p| p.genuine).count();
    let imposter = pairs.len() - genuine;
    if genuine == 0 || imposter == 0 {
        return Err(DulError::Contract(
            "roc needs at least one genuine and one imposter pair".into(),
        ));
    }
    if pairs.iter().any(|p| !p.score.is_finite()) {
        return Err(DulError::Contract("scores must be finite".into()));
    }
    if !(interval.0 > 0.0 && interval.1 > interval.0) {
        return Err(DulError::Contract("invalid AUC interval".into()));
    }

    let mut sorted: Vec<ScorePair> = pairs.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    // Threshold above every score accepts nothing.
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < sorted.len() {
        let t = sorted[k].score;
        while k < sorted.len() && sorted[k].score == t {
            if sorted[k].genuine {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / imposter as f64,
            tpr: tp as f64 / genuine as f64,
        });
    }
    // Sweep already yields non-decreasing fpr and tpr; keep the envelope explicit.
    let mut best = 0.0f64;
    for p in &mut points {
        best = best.max(p.tpr);
        p.tpr = best;
    }

    let tpr_at = targets
        .iter()
        .map(|&t| TprAtFpr {
            fpr: t,
            tpr: tpr_at_fpr(&points, t),
        })
        .collect();
    let interval_auc = log_interval_auc(&points, interval);
    Ok(RocReport {
        points,
        tpr_at,
        interval_auc,
    })
}

fn log_interval_auc(points: &[RocPoint], (lo, hi): (f64, f64)) -> f64 {
    // Breakpoints of the step curve inside the interval.
    let mut cuts: Vec<f64> = vec![lo];
    cuts.extend(points.iter().map(|p| p.fpr).filter(|&f| f > lo && f < hi));
    cuts.push(hi);
    cuts.dedup();
    let width = hi.log10() - lo.log10();
    let mut area = 0.0;
    for w in cuts.windows(2) {
        // Constant on [w0, w1): value at the left end.
        area += tpr_at_fpr(points, w[0]) * (w[1].log10() - w[0].log10());
    }
    (area / width).clamp(0.0, 1.0)
}

/// All `i < j` index pairs over `n` samples, or a seeded uniform subsample
/// of `cap` of them when there are more. Output is in row-major pair order.
pub fn pair_indices(n: usize, cap: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    if total <= cap {
        let mut out = Vec::with_capacity(total);
        for i in 0..n {
            for j in i + 1..n {
                out.push((i, j));
            }
        }
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample_indices(&mut rng, total, cap).into_vec();
    picks.sort_unstable();
    // Walk rows: row i owns the flat range [start, start + n - 1 - i).
    let mut out = Vec::with_capacity(cap);
    let (mut i, mut start) = (0usize, 0usize);
    for k in picks {
        while k >= start + (n - 1 - i) {
            start += n - 1 - i;
            i += 1;
        }
        out.push((i, i + 1 + (k - start)));
    }
    out
}

/// Scores index pairs of embeddings. `sigma` is required for MLS.
pub fn score_pairs(
    mu: &Matrix,
    sigma: Option<&Matrix>,
    labels: &[usize],
    metric: Metric,
    pairs: &[(usize, usize)],
) -> Result<Vec<ScorePair>> {
    ensure_len("labels", mu.rows, labels.len())?;
    let sigma = match (metric, sigma) {
        (Metric::Mls, None) => return Err(DulError::Contract("mls needs sigma".into())),
        (_, s) => s,
    };
    if let Some(s) = sigma {
        ensure_len("sigma rows", mu.rows, s.rows)?;
        ensure_len("sigma cols", mu.cols, s.cols)?;
    }
    pairs
        .iter()
        .map(|&(i, j)| {
            let score = match (metric, sigma) {
                (Metric::Mls, Some(s)) => mls_terms(mu.row(i), s.row(i), mu.row(j), s.row(j))?,
                _ => cosine_score(mu.row(i), mu.row(j))?,
            };
            Ok(ScorePair {
                score,
                genuine: labels[i] == labels[j],
            })
        })
        .collect()
}

/// Fraction of probes whose nearest gallery entry (cosine) shares their
/// label. Ties go to the lowest gallery index.
pub fn rank1(probes: &Matrix, probe_labels: &[usize], gallery: &Matrix, gallery_labels: &[usize]) -> Result<f64> {
    ensure_len("probe labels", probes.rows, probe_labels.len())?;
    ensure_len("gallery labels", gallery.rows, gallery_labels.len())?;
    if gallery.rows == 0 {
        return Err(DulError::Contract("empty gallery".into()));
    }
    if probes.rows == 0 {
        return Err(DulError::Contract("no probes".into()));
    }
    ensure_len("gallery dim", probes.cols, gallery.cols)?;
    let mut hits = 0;
    for (p, &label) in probes.iter_rows().zip(probe_labels) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, g) in gallery.iter_rows().enumerate() {
            let s = cosine_score(p, g)?;
            if s > best.0 {
                best = (s, j);
            }
        }
        if gallery_labels[best.1] == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.rows as f64)
}

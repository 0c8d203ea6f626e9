//! Diagnostic reports over trained encoders.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, DulError, Result};
use crate::linalg::{norm, Matrix};
use crate::losses::{ClassifierWeights, SoftmaxConfig};
use crate::metrics::cosine_score;
use crate::model::EncoderModel;
use crate::synth::SyntheticIdentityDataset;
use crate::train::predict_labels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBucket {
    pub noise_level: f64,
    pub count: usize,
    pub mean_sigma: f64,
    /// Population standard deviation.
    pub std_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub sigma: Vec<f64>,
    /// Sorted by ascending noise level.
    pub buckets: Vec<NoiseBucket>,
    /// Probability that a corrupted sample outranks a clean one by σ.
    /// Absent when every sample has the same noise level.
    pub corrupted_auc: Option<f64>,
}

impl UncertaintyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("noise_level,count,mean_sigma,std_sigma\n");
        for b in &self.buckets {
            let _ = writeln!(out, "{},{},{},{}", b.noise_level, b.count, b.mean_sigma, b.std_sigma);
        }
        out
    }
}

pub fn uncertainty_report(model: &EncoderModel, ds: &SyntheticIdentityDataset) -> Result<UncertaintyReport> {
    let sigma = model.uncertainty(&ds.inputs)?;
    uncertainty_from_scores(sigma, &ds.noise_levels)
}

/// Builds the report from precomputed per-sample σ.
pub fn uncertainty_from_scores(sigma: Vec<f64>, noise_levels: &[f64]) -> Result<UncertaintyReport> {
    ensure_len("noise levels", sigma.len(), noise_levels.len())?;
    if sigma.is_empty() {
        return Err(DulError::Contract(
            "uncertainty report needs at least one sample".into(),
        ));
    }
    if noise_levels.iter().any(|n| !n.is_finite()) {
        return Err(DulError::Contract("dataset lacks finite noise annotations".into()));
    }
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| noise_levels[a].total_cmp(&noise_levels[b]).then(a.cmp(&b)));
    let mut buckets = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let level = noise_levels[order[start]];
        let mut end = start;
        while end < order.len() && noise_levels[order[end]] == level {
            end += 1;
        }
        let vals: Vec<f64> = order[start..end].iter().map(|&i| sigma[i]).collect();
        let (mean, std) = mean_std(&vals);
        buckets.push(NoiseBucket {
            noise_level: level,
            count: vals.len(),
            mean_sigma: mean,
            std_sigma: std,
        });
        start = end;
    }
    let min = buckets[0].noise_level;
    let corrupted: Vec<bool> = noise_levels.iter().map(|&n| n > min).collect();
    let corrupted_auc = ranking_auc(&sigma, &corrupted);
    Ok(UncertaintyReport {
        sigma,
        buckets,
        corrupted_auc,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mann-Whitney AUC: P(score of a positive > score of a negative), ties
/// counted as one half. `None` if either class is empty.
pub fn ranking_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks over positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum += midrank * order[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Easy,
    SemiHard,
    Hard,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Easy, Category::SemiHard, Category::Hard];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Easy => "easy",
            Category::SemiHard => "semi-hard",
            Category::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tertiles {
    pub categories: Vec<Category>,
    /// Largest σ in the easy and semi-hard groups.
    pub thresholds: [f64; 2],
}

/// Splits samples into σ tertiles by rank; the sample at sorted position
/// `k` of `N` lands in group `floor(3k / N)`. Ties keep index order.
pub fn sigma_tertiles(sigma: &[f64]) -> Result<Tertiles> {
    if sigma.len() < 3 {
        return Err(DulError::Contract("tertiles need at least 3 samples".into()));
    }
    let n = sigma.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]).then(a.cmp(&b)));
    let mut categories = vec![Category::Easy; n];
    let mut thresholds = [f64::NEG_INFINITY; 2];
    for (k, &i) in order.iter().enumerate() {
        let cat = Category::ALL[3 * k / n];
        categories[i] = cat;
        if cat != Category::Hard {
            thresholds[cat.index()] = sigma[i];
        }
    }
    Ok(Tertiles { categories, thresholds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadCaseRow {
    pub errors: usize,
    pub counts: [usize; 3],
    /// Fraction of this model's errors per category; absent without errors.
    pub proportions: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadCaseReport {
    pub thresholds: [f64; 2],
    pub model_a: BadCaseRow,
    pub model_b: BadCaseRow,
}

impl BadCaseReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,errors_a,errors_b,share_a,share_b\n");
        let share = |row: &BadCaseRow, c: usize| row.proportions.map_or(String::new(), |p| p[c].to_string());
        for c in Category::ALL {
            let i = c.index();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.name(),
                self.model_a.counts[i],
                self.model_b.counts[i],
                share(&self.model_a, i),
                share(&self.model_b, i)
            );
        }
        out
    }
}

/// A trained encoder together with the classifier used to read labels off it.
#[derive(Debug, Clone, Copy)]
pub struct Classifier<'a> {
    pub model: &'a EncoderModel,
    pub weights: &'a ClassifierWeights,
    pub softmax: &'a SoftmaxConfig,
}

impl Classifier<'_> {
    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        predict_labels(self.model, self.weights, self.softmax, inputs)
    }
}

pub fn bad_case_report(
    a: Classifier<'_>,
    b: Classifier<'_>,
    ds: &SyntheticIdentityDataset,
    sigma_source: &EncoderModel,
) -> Result<BadCaseReport> {
    let sigma = sigma_source.uncertainty(&ds.inputs)?;
    let pa = a.predict(&ds.inputs)?;
    let pb = b.predict(&ds.inputs)?;
    bad_case_from_predictions(&pa, &pb, &ds.labels, &sigma)
}

pub fn bad_case_from_predictions(
    pred_a: &[usize],
    pred_b: &[usize],
    labels: &[usize],
    sigma: &[f64],
) -> Result<BadCaseReport> {
    ensure_len("predictions of model a", labels.len(), pred_a.len())?;
    ensure_len("predictions of model b", labels.len(), pred_b.len())?;
    ensure_len("sigma", labels.len(), sigma.len())?;
    let t = sigma_tertiles(sigma)?;
    let row = |pred: &[usize]| {
        let mut counts = [0usize; 3];
        for ((p, l), c) in pred.iter().zip(labels).zip(&t.categories) {
            if p != l {
                counts[c.index()] += 1;
            }
        }
        let errors: usize = counts.iter().sum();
        let proportions = (errors > 0).then(|| counts.map(|k| k as f64 / errors as f64));
        BadCaseRow {
            errors,
            counts,
            proportions,
        }
    };
    Ok(BadCaseReport {
        thresholds: t.thresholds,
        model_a: row(pred_a),
        model_b: row(pred_b),
    })
}

/// Per-category mean of `|mu_i - w_{y_i}|`, averaged within each class first
/// and then across the classes present in that category.
///
/// With `normalize` both `mu_i` and `w_c` are scaled to unit length first.
pub fn intra_class_distances(
    mu: &Matrix,
    labels: &[usize],
    w: &ClassifierWeights,
    categories: &[Category],
    normalize: bool,
) -> Result<[Option<f64>; 3]> {
    ensure_len("labels", mu.rows, labels.len())?;
    ensure_len("categories", mu.rows, categories.len())?;
    ensure_len("embedding dim", w.dim(), mu.cols)?;
    let c = w.num_classes();
    let mut per_class = vec![[(0.0f64, 0usize); 3]; c];
    let mut seen = vec![false; c];
    for (i, (&y, cat)) in labels.iter().zip(categories).enumerate() {
        if y >= c {
            return Err(DulError::LabelOutOfRange {
                label: y,
                num_classes: c,
            });
        }
        seen[y] = true;
        let d = if normalize {
            let (m, wc) = (mu.row(i), w.column(y));
            let (nm, nw) = (norm(m), norm(wc));
            if nm == 0.0 || nw == 0.0 {
                return Err(DulError::ZeroNorm("embedding or class center"));
            }
            m.iter()
                .zip(wc)
                .map(|(a, b)| (a / nm - b / nw).powi(2))
                .sum::<f64>()
                .sqrt()
        } else {
            crate::linalg::sq_dist(mu.row(i), w.column(y)).sqrt()
        };
        let slot = &mut per_class[y][cat.index()];
        slot.0 += d;
        slot.1 += 1;
    }
    if let Some(empty) = seen.iter().position(|&s| !s) {
        return Err(DulError::Contract(format!("class {empty} has no samples")));
    }
    let mut out = [None; 3];
    for k in 0..3 {
        let means: Vec<f64> = per_class
            .iter()
            .filter(|s| s[k].1 > 0)
            .map(|s| s[k].0 / s[k].1 as f64)
            .collect();
        if !means.is_empty() {
            out[k] = Some(means.iter().sum::<f64>() / means.len() as f64);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub level: f64,
    pub model: usize,
    pub genuine: f64,
    pub imposter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    pub fn get(&self, level: f64, model: usize) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.level == level && r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,model,genuine,imposter\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.level, r.model, r.genuine, r.imposter);
        }
        out
    }
}

/// Mean cosine similarity between each pair's first input and a corrupted
/// copy of its second input, for every corruption level and model.
///
/// One noise direction per pair is drawn from `seed` and scaled by each
/// level, so every model sees the same corrupted inputs.
pub fn blur_pair_probe(
    models: &[&EncoderModel],
    inputs: &Matrix,
    genuine: &[(usize, usize)],
    imposter: &[(usize, usize)],
    ladder: &[f64],
    seed: u64,
) -> Result<ProbeTable> {
    if genuine.is_empty() || imposter.is_empty() {
        return Err(DulError::Contract("probe needs genuine and imposter pairs".into()));
    }
    let dim = inputs.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |count: usize| -> Vec<f64> { (0..count * dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let g_noise = noise(genuine.len());
    let i_noise = noise(imposter.len());

    let build = |pairs: &[(usize, usize)], eps: &[f64], level: f64| -> (Matrix, Matrix) {
        let mut left = Vec::with_capacity(pairs.len() * dim);
        let mut right = Vec::with_capacity(pairs.len() * dim);
        for (p, &(a, b)) in pairs.iter().enumerate() {
            left.extend_from_slice(inputs.row(a));
            let e = &eps[p * dim..(p + 1) * dim];
            right.extend(inputs.row(b).iter().zip(e).map(|(x, n)| x + level * n));
        }
        (
            Matrix::from_vec(pairs.len(), dim, left),
            Matrix::from_vec(pairs.len(), dim, right),
        )
    };
    let mean_cos = |m: &EncoderModel, l: &Matrix, r: &Matrix| -> Result<f64> {
        let (ml, _) = m.embed(l)?;
        let (mr, _) = m.embed(r)?;
        let mut sum = 0.0;
        for i in 0..ml.rows {
            sum += cosine_score(ml.row(i), mr.row(i))?;
        }
        Ok(sum / ml.rows as f64)
    };

    let mut rows = Vec::with_capacity(ladder.len() * models.len());
    for &level in ladder {
        let (gl, gr) = build(genuine, &g_noise, level);
        let (il, ir) = build(imposter, &i_noise, level);
        for (k, m) in models.iter().enumerate() {
            rows.push(ProbeRow {
                level,
                model: k,
                genuine: mean_cos(m, &gl, &gr)?,
                imposter: mean_cos(m, &il, &ir)?,
            });
        }
    }
    Ok(ProbeTable { rows })
}

/// Sample Pearson correlation; `None` if either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

//! Training objectives with analytic gradients.
//!
//! * margin-softmax family over (sampled) embeddings,
//! * KL divergence of `N(mu, sigma^2)` from `N(0, I)`,
//! * the combined classification objective `softmax + lambda * kl`,
//! * heteroscedastic Gaussian NLL against fixed class centers.
//!
//! The KL and regression terms are averaged over embedding dimensions so
//! `lambda` and learning rates do not depend on `D`.

use serde::{Deserialize, Serialize};

use crate::embedding::GaussianEmbedding;
use crate::error::{ensure_len, DulError, Result};
use crate::linalg::{argmax, dot, norm, Matrix};

/// Raw log-variance outputs are clamped to `[-LOG_VAR_CLAMP, LOG_VAR_CLAMP]`
/// inside the regression loss.
pub const LOG_VAR_CLAMP: f64 = 15.0;

/// Class centers, one `D`-dimensional column `w_c` per class.
///
/// Stored column-major (each class vector contiguous).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    dim: usize,
    num_classes: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl ClassifierWeights {
    /// `data` holds `num_classes` consecutive columns of length `dim`.
    pub fn new(dim: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        ensure_len("classifier weights", dim * num_classes, data.len())?;
        if dim == 0 || num_classes == 0 {
            return Err(DulError::Contract("classifier needs dim >= 1 and >= 1 class".into()));
        }
        Ok(Self {
            dim,
            num_classes,
            data,
            normalized: false,
        })
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let dim = columns.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(dim * columns.len());
        for c in columns {
            ensure_len("classifier column", dim, c.len())?;
            data.extend_from_slice(c);
        }
        Self::new(dim, columns.len(), data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.normalized = false;
        &mut self.data
    }

    /// Gaussian columns with entries `N(0, 1/dim)`, so `|w_c|` is near 1.
    pub fn random(dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim.max(1) as f64).sqrt();
        let data = (0..dim * num_classes)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Self::new(dim, num_classes, data)
    }

    /// Copy with every column scaled to unit length.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for col in data.chunks_exact_mut(self.dim) {
            let n = norm(col);
            if n == 0.0 {
                return Err(DulError::ZeroNorm("classifier column"));
            }
            col.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            dim: self.dim,
            num_classes: self.num_classes,
            data,
            normalized: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftmaxVariant {
    /// `w_c . s`.
    Plain,
    /// `scale * (cos_y - m)` for the target class, `scale * cos_c` otherwise.
    AmSoftmax,
    /// `scale * cos(theta_y + m)` for the target class.
    Arcface,
    /// `scale * cos_c` for every class.
    L2Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxConfig {
    pub variant: SoftmaxVariant,
    pub margin: f64,
    pub scale: f64,
    /// Plain variant only: feed `s / |s|` to an unnormalized classifier.
    #[serde(default)]
    pub normalize_features: bool,
}

impl SoftmaxConfig {
    pub fn plain() -> Self {
        Self {
            variant: SoftmaxVariant::Plain,
            margin: 0.0,
            scale: 1.0,
            normalize_features: false,
        }
    }

    pub fn am_softmax(margin: f64, scale: f64) -> Self {
        Self {
            variant: SoftmaxVariant::AmSoftmax,
            margin,
            scale,
            normalize_features: false,
        }
    }

    pub fn arcface(margin: f64, scale: f64) -> Self {
        Self {
            variant: SoftmaxVariant::Arcface,
            margin,
            scale,
            normalize_features: false,
        }
    }

    pub fn l2_softmax(scale: f64) -> Self {
        Self {
            variant: SoftmaxVariant::L2Softmax,
            margin: 0.0,
            scale,
            normalize_features: false,
        }
    }

    /// Default hyper-parameters per variant.
    pub fn default_for(variant: SoftmaxVariant) -> Self {
        match variant {
            SoftmaxVariant::Plain => Self::plain(),
            SoftmaxVariant::AmSoftmax => Self::am_softmax(0.35, 30.0),
            SoftmaxVariant::Arcface => Self::arcface(0.5, 64.0),
            SoftmaxVariant::L2Softmax => Self::l2_softmax(16.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DulError::Contract(msg.to_string()));
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad("softmax margin must be finite and >= 0");
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad("softmax scale must be finite and > 0");
        }
        match self.variant {
            SoftmaxVariant::Plain | SoftmaxVariant::L2Softmax if self.margin != 0.0 => {
                bad("plain and l2-softmax take no margin")
            }
            SoftmaxVariant::Arcface if self.margin >= std::f64::consts::FRAC_PI_2 => {
                bad("arcface margin must be < pi/2")
            }
            _ => Ok(()),
        }
    }

    fn normalizes_classifier(&self) -> bool {
        self.variant != SoftmaxVariant::Plain
    }

    fn normalizes_features(&self) -> bool {
        self.variant != SoftmaxVariant::Plain || self.normalize_features
    }
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        Self::default_for(SoftmaxVariant::AmSoftmax)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClsLossConfig {
    pub softmax: SoftmaxConfig,
    pub lambda: f64,
}

impl ClsLossConfig {
    pub fn validate(&self) -> Result<()> {
        self.softmax.validate()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(DulError::Contract("lambda must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Loss value with gradients w.r.t. the embeddings and the classifier.
#[derive(Debug, Clone)]
pub struct SoftmaxOutput {
    pub loss: f64,
    pub grad_s: Matrix,
    /// Same layout as [`ClassifierWeights::as_slice`].
    pub grad_w: Vec<f64>,
}

/// Classifier geometry shared by every sample of a batch.
struct PreparedClassifier {
    /// Unit columns for normalizing variants, raw columns otherwise.
    columns: Vec<f64>,
    norms: Vec<f64>,
}

fn prepare(w: &ClassifierWeights, cfg: &SoftmaxConfig) -> Result<PreparedClassifier> {
    let norms: Vec<f64> = w.data.chunks_exact(w.dim).map(norm).collect();
    if !cfg.normalizes_classifier() {
        return Ok(PreparedClassifier {
            columns: w.data.clone(),
            norms,
        });
    }
    if norms.contains(&0.0) {
        return Err(DulError::ZeroNorm("classifier column"));
    }
    let mut columns = w.data.clone();
    for (col, n) in columns.chunks_exact_mut(w.dim).zip(&norms) {
        col.iter_mut().for_each(|v| *v /= n);
    }
    Ok(PreparedClassifier { columns, norms })
}

/// Gradient of `x / |x|` pulled back to `x`: `(g - x_hat (x_hat . g)) / |x|`.
fn unnormalize_grad(x_hat: &[f64], n: f64, g: &mut [f64]) {
    let proj = dot(x_hat, g);
    for (gi, xi) in g.iter_mut().zip(x_hat) {
        *gi = (*gi - xi * proj) / n;
    }
}

fn arcface_target(cos: f64, margin: f64) -> (f64, f64) {
    let c = cos.clamp(-1.0, 1.0);
    let sin = (1.0 - c * c).max(0.0).sqrt();
    let value = c * margin.cos() - sin * margin.sin();
    // d cos(theta + m) / d cos(theta)
    let slope = margin.cos() + margin.sin() * c / sin.max(1e-12);
    (value, slope)
}

/// Mean cross-entropy of the configured softmax variant over a batch.
pub fn softmax_loss(
    s_batch: &Matrix,
    labels: &[usize],
    w: &ClassifierWeights,
    cfg: &SoftmaxConfig,
) -> Result<SoftmaxOutput> {
    cfg.validate()?;
    ensure_len("labels", s_batch.rows, labels.len())?;
    ensure_len("embedding dim", w.dim, s_batch.cols)?;
    if s_batch.rows == 0 {
        return Err(DulError::Contract("empty batch".into()));
    }
    let (d, c_count, n) = (w.dim, w.num_classes, s_batch.rows);
    let prepared = prepare(w, cfg)?;
    let inv_n = 1.0 / n as f64;

    let mut grad_s = Matrix::zeros(n, d);
    // Gradient w.r.t. the (possibly unit) columns used for the logits.
    let mut grad_cols = vec![0.0; d * c_count];
    let mut total = 0.0;

    let mut feat = vec![0.0; d];
    let mut logits = vec![0.0; c_count];
    let mut dlogit_dcos = vec![0.0; c_count];

    for (i, &y) in labels.iter().enumerate() {
        if y >= c_count {
            return Err(DulError::LabelOutOfRange {
                label: y,
                num_classes: c_count,
            });
        }
        let s = s_batch.row(i);
        let s_norm = norm(s);
        if cfg.normalizes_features() {
            if s_norm == 0.0 {
                return Err(DulError::ZeroNorm("embedding row"));
            }
            feat.iter_mut().zip(s).for_each(|(f, v)| *f = v / s_norm);
        } else {
            feat.copy_from_slice(s);
        }

        for (c, col) in prepared.columns.chunks_exact(d).enumerate() {
            let cos = dot(col, &feat);
            let (z, slope) = match cfg.variant {
                SoftmaxVariant::Plain => (cos, 1.0),
                SoftmaxVariant::L2Softmax => (cfg.scale * cos, cfg.scale),
                SoftmaxVariant::AmSoftmax => {
                    let m = if c == y { cfg.margin } else { 0.0 };
                    (cfg.scale * (cos - m), cfg.scale)
                }
                SoftmaxVariant::Arcface if c == y => {
                    let (v, slope) = arcface_target(cos, cfg.margin);
                    (cfg.scale * v, cfg.scale * slope)
                }
                SoftmaxVariant::Arcface => (cfg.scale * cos, cfg.scale),
            };
            logits[c] = z;
            dlogit_dcos[c] = slope;
        }

        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse - logits[y];

        let g_row = grad_s.row_mut(i);
        for (c, col) in prepared.columns.chunks_exact(d).enumerate() {
            let p = (logits[c] - lse).exp();
            let g_z = (p - if c == y { 1.0 } else { 0.0 }) * inv_n;
            let g_cos = g_z * dlogit_dcos[c];
            for l in 0..d {
                g_row[l] += g_cos * col[l];
            }
            let gc = &mut grad_cols[c * d..(c + 1) * d];
            for l in 0..d {
                gc[l] += g_cos * feat[l];
            }
        }
        if cfg.normalizes_features() {
            unnormalize_grad(&feat, s_norm, g_row);
        }
    }

    if cfg.normalizes_classifier() {
        for ((g, col), n) in grad_cols
            .chunks_exact_mut(d)
            .zip(prepared.columns.chunks_exact(d))
            .zip(&prepared.norms)
        {
            unnormalize_grad(col, *n, g);
        }
    }

    Ok(SoftmaxOutput {
        loss: total * inv_n,
        grad_s,
        grad_w: grad_cols,
    })
}

/// Margin-free class scores of one embedding: `cos_c` for normalizing
/// variants, `w_c . s` for the plain variant.
pub fn class_scores(s: &[f64], w: &ClassifierWeights, cfg: &SoftmaxConfig) -> Result<Vec<f64>> {
    ensure_len("embedding dim", w.dim, s.len())?;
    let prepared = prepare(w, cfg)?;
    let s_norm = norm(s);
    let scale = if cfg.normalizes_features() {
        if s_norm == 0.0 {
            return Err(DulError::ZeroNorm("embedding row"));
        }
        1.0 / s_norm
    } else {
        1.0
    };
    Ok(prepared
        .columns
        .chunks_exact(w.dim)
        .map(|col| dot(col, s) * scale)
        .collect())
}

/// Predicted class; ties resolve to the lowest class index.
pub fn predict_class(s: &[f64], w: &ClassifierWeights, cfg: &SoftmaxConfig) -> Result<usize> {
    Ok(argmax(&class_scores(s, w, cfg)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlOutput {
    pub value: f64,
    pub grad_mu: Vec<f64>,
    pub grad_sigma: Vec<f64>,
}

/// `KL(N(mu, sigma^2) || N(0, I))` averaged over dimensions.
pub fn kl_regularizer(g: &GaussianEmbedding) -> KlOutput {
    kl_terms(g.mu(), g.sigma()).expect("validated embedding")
}

/// Slice form of [`kl_regularizer`].
pub fn kl_terms(mu: &[f64], sigma: &[f64]) -> Result<KlOutput> {
    ensure_len("sigma", mu.len(), sigma.len())?;
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(DulError::Contract(format!("sigma must be > 0, got {s}")));
    }
    let inv_d = 1.0 / mu.len() as f64;
    let mut value = 0.0;
    let mut grad_mu = Vec::with_capacity(mu.len());
    let mut grad_sigma = Vec::with_capacity(mu.len());
    for (&m, &s) in mu.iter().zip(sigma) {
        let var = s * s;
        value += -0.5 * (1.0 + var.ln() - m * m - var);
        grad_mu.push(m * inv_d);
        grad_sigma.push((s - 1.0 / s) * inv_d);
    }
    Ok(KlOutput {
        value: value * inv_d,
        grad_mu,
        grad_sigma,
    })
}

/// A batch of Gaussian embeddings prepared for the classification objective.
#[derive(Debug, Clone, Copy)]
pub struct ClsBatch<'a> {
    pub mu: &'a Matrix,
    pub sigma: &'a Matrix,
    /// Reparameterization noise; `None` trains the deterministic baseline
    /// (`s = mu`, no KL term).
    pub eps: Option<&'a Matrix>,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct ClsLossOutput {
    pub total: f64,
    pub softmax: f64,
    /// Batch mean of the per-sample KL term (0 for the baseline).
    pub kl: f64,
    pub grad_mu: Matrix,
    pub grad_sigma: Matrix,
    pub grad_w: Vec<f64>,
}

/// `softmax(mu + eps * sigma) + lambda * mean_i KL_i`.
pub fn cls_total_loss(batch: ClsBatch<'_>, w: &ClassifierWeights, cfg: &ClsLossConfig) -> Result<ClsLossOutput> {
    cfg.validate()?;
    let (n, d) = (batch.mu.rows, batch.mu.cols);
    ensure_len("sigma rows", n, batch.sigma.rows)?;
    ensure_len("sigma cols", d, batch.sigma.cols)?;

    let Some(eps) = batch.eps else {
        let out = softmax_loss(batch.mu, batch.labels, w, &cfg.softmax)?;
        return Ok(ClsLossOutput {
            total: out.loss,
            softmax: out.loss,
            kl: 0.0,
            grad_mu: out.grad_s,
            grad_sigma: Matrix::zeros(n, d),
            grad_w: out.grad_w,
        });
    };
    ensure_len("eps rows", n, eps.rows)?;
    ensure_len("eps cols", d, eps.cols)?;

    let mut s = Matrix::zeros(n, d);
    for ((si, mi), (sdi, ei)) in s
        .data
        .iter_mut()
        .zip(&batch.mu.data)
        .zip(batch.sigma.data.iter().zip(&eps.data))
    {
        *si = mi + ei * sdi;
    }
    let sm = softmax_loss(&s, batch.labels, w, &cfg.softmax)?;

    let weight = cfg.lambda / n as f64;
    let mut kl_sum = 0.0;
    let mut grad_mu = sm.grad_s.clone();
    let mut grad_sigma = Matrix::zeros(n, d);
    for i in 0..n {
        let kl = kl_terms(batch.mu.row(i), batch.sigma.row(i))?;
        kl_sum += kl.value;
        let gs = sm.grad_s.row(i);
        let e = eps.row(i);
        let gm = grad_mu.row_mut(i);
        for l in 0..d {
            gm[l] += weight * kl.grad_mu[l];
        }
        let gsig = grad_sigma.row_mut(i);
        for l in 0..d {
            gsig[l] = gs[l] * e[l] + weight * kl.grad_sigma[l];
        }
    }
    let kl = kl_sum / n as f64;
    Ok(ClsLossOutput {
        total: sm.loss + cfg.lambda * kl,
        softmax: sm.loss,
        kl,
        grad_mu,
        grad_sigma,
        grad_w: sm.grad_w,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgsOutput {
    pub value: f64,
    /// `0.5 * mean_l exp(-r_l) (w_l - mu_l)^2`
    pub residual_term: f64,
    /// `0.5 * mean_l r_l`
    pub logvar_term: f64,
    pub grad_mu: Vec<f64>,
    pub grad_r: Vec<f64>,
    /// Number of `r` entries that hit the clamp.
    pub clamped: usize,
}

/// Per-sample heteroscedastic Gaussian NLL with log-variance `r`,
/// `0.5 * mean_l [exp(-r_l) (w_l - mu_l)^2 + r_l]`, constant dropped.
///
/// `r` is clamped to `[-LOG_VAR_CLAMP, LOG_VAR_CLAMP]`; clamped entries get
/// zero `r`-gradient and are counted in [`RgsOutput::clamped`].
pub fn heteroscedastic_nll(mu: &[f64], r: &[f64], target: &[f64]) -> Result<RgsOutput> {
    ensure_len("log-variance", mu.len(), r.len())?;
    ensure_len("target", mu.len(), target.len())?;
    if mu.is_empty() {
        return Err(DulError::Contract("empty embedding".into()));
    }
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !(finite(mu) && finite(r) && finite(target)) {
        return Err(DulError::Contract("heteroscedastic_nll inputs must be finite".into()));
    }
    let inv_d = 1.0 / mu.len() as f64;
    let mut residual_term = 0.0;
    let mut logvar_term = 0.0;
    let mut clamped = 0;
    let mut grad_mu = Vec::with_capacity(mu.len());
    let mut grad_r = Vec::with_capacity(mu.len());
    for ((&m, &rl), &t) in mu.iter().zip(r).zip(target) {
        let rc = rl.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        let inside = rc == rl;
        if !inside {
            clamped += 1;
        }
        let precision = (-rc).exp();
        let e2 = (t - m) * (t - m);
        residual_term += precision * e2;
        logvar_term += rc;
        grad_mu.push(precision * (m - t) * inv_d);
        grad_r.push(if inside {
            0.5 * (1.0 - precision * e2) * inv_d
        } else {
            0.0
        });
    }
    let residual_term = 0.5 * residual_term * inv_d;
    let logvar_term = 0.5 * logvar_term * inv_d;
    Ok(RgsOutput {
        value: residual_term + logvar_term,
        residual_term,
        logvar_term,
        grad_mu,
        grad_r,
        clamped,
    })
}

#[derive(Debug, Clone)]
pub struct RgsBatchOutput {
    pub value: f64,
    pub residual_term: f64,
    pub logvar_term: f64,
    pub grad_mu: Matrix,
    pub grad_r: Matrix,
    pub clamped: usize,
}

/// Batch mean of [`heteroscedastic_nll`] with target `w_{y_i}` per sample.
pub fn batch_rgs_loss(mu: &Matrix, raw_r: &Matrix, labels: &[usize], w: &ClassifierWeights) -> Result<RgsBatchOutput> {
    ensure_len("labels", mu.rows, labels.len())?;
    ensure_len("embedding dim", w.dim, mu.cols)?;
    let mut targets = Matrix::zeros(mu.rows, w.dim);
    for (i, &y) in labels.iter().enumerate() {
        if y >= w.num_classes {
            return Err(DulError::LabelOutOfRange {
                label: y,
                num_classes: w.num_classes,
            });
        }
        targets.row_mut(i).copy_from_slice(w.column(y));
    }
    batch_nll(mu, raw_r, &targets)
}

/// Batch mean of [`heteroscedastic_nll`] against per-row targets.
pub fn batch_nll(mu: &Matrix, raw_r: &Matrix, targets: &Matrix) -> Result<RgsBatchOutput> {
    let (n, d) = (mu.rows, mu.cols);
    ensure_len("log-variance rows", n, raw_r.rows)?;
    ensure_len("log-variance cols", d, raw_r.cols)?;
    ensure_len("target rows", n, targets.rows)?;
    ensure_len("target cols", d, targets.cols)?;
    if n == 0 {
        return Err(DulError::Contract("empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut out = RgsBatchOutput {
        value: 0.0,
        residual_term: 0.0,
        logvar_term: 0.0,
        grad_mu: Matrix::zeros(n, d),
        grad_r: Matrix::zeros(n, d),
        clamped: 0,
    };
    for i in 0..n {
        let per = heteroscedastic_nll(mu.row(i), raw_r.row(i), targets.row(i))?;
        out.value += per.value;
        out.residual_term += per.residual_term;
        out.logvar_term += per.logvar_term;
        out.clamped += per.clamped;
        for (g, v) in out.grad_mu.row_mut(i).iter_mut().zip(&per.grad_mu) {
            *g = v * inv_n;
        }
        for (g, v) in out.grad_r.row_mut(i).iter_mut().zip(&per.grad_r) {
            *g = v * inv_n;
        }
    }
    out.value *= inv_n;
    out.residual_term *= inv_n;
    out.logvar_term *= inv_n;
    Ok(out)
}

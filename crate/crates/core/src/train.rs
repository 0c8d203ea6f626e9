//! SGD training loops: deterministic baseline, stochastic classification
//! with KL regularization, and two-stage heteroscedastic regression onto
//! frozen class centers.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::harmonic_mean;
use crate::error::{DulError, Result};
use crate::linalg::Matrix;
use crate::losses::{
    batch_nll, cls_total_loss, predict_class, ClassifierWeights, ClsBatch, ClsLossConfig, SoftmaxConfig,
    SoftmaxVariant, LOG_VAR_CLAMP,
};
use crate::model::EncoderModel;
use crate::synth::SyntheticIdentityDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    Classification(ClsLossConfig),
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// One symmetric triangle `base -> max -> base` over the run.
    Triangular,
    /// Starts at `max_lr`; divided by 10 at 40% and again at 60% of the run.
    StepDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub max_lr: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub schedule: Schedule,
    /// Forces `eps = 0` in the stochastic classification objective.
    pub zero_eps: bool,
}

impl TrainConfig {
    pub fn classification(loss: ClsLossConfig, steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            base_lr: 0.0,
            max_lr: 0.1,
            seed,
            loss: LossKind::Classification(loss),
            schedule: Schedule::Triangular,
            zero_eps: false,
        }
    }

    pub fn regression(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            base_lr: 0.0,
            max_lr: 0.01,
            seed,
            loss: LossKind::Regression,
            schedule: Schedule::StepDecay,
            zero_eps: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DulError::Contract(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and >= 0");
        }
        if !(self.base_lr.is_finite() && self.max_lr.is_finite() && self.base_lr >= 0.0 && self.max_lr >= 0.0) {
            return bad("learning rates must be finite and >= 0");
        }
        if let LossKind::Classification(c) = &self.loss {
            c.validate()?;
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Triangular => triangular_lr(step, self.steps, self.base_lr, self.max_lr),
            Schedule::StepDecay => step_decay_lr(step, self.steps, self.max_lr),
        }
    }
}

/// Linear `base -> max` over the first half of the run, `max -> base` over
/// the second half.
pub fn triangular_lr(step: usize, total_steps: usize, base_lr: f64, max_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(DulError::Contract(format!(
            "step {step} out of range for {total_steps} steps"
        )));
    }
    let half = total_steps as f64 / 2.0;
    let dist = (step as f64 - half).abs() / half;
    Ok(max_lr - (max_lr - base_lr) * dist)
}

/// `start`, then `start / 10` from 40% of the run, `start / 100` from 60%.
pub fn step_decay_lr(step: usize, total_steps: usize, start: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(DulError::Contract(format!(
            "step {step} out of range for {total_steps} steps"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(if frac < 0.4 {
        start
    } else if frac < 0.6 {
        start * 0.1
    } else {
        start * 0.01
    })
}

/// SGD with momentum; weight decay is added to the gradient before the
/// momentum update: `v = m v + (g + wd p)`, `p -= lr v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len(), "param/grad group count");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pj, gj), vj) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vj = self.momentum * *vj + (gj + self.weight_decay * *pj);
                *pj -= lr * *vj;
            }
        }
    }
}

/// Epoch-shuffled minibatches drawn from a dedicated RNG stream.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { rng, order, cursor: 0 }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(idx.len(), m.cols, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Softmax term (classification) or residual term (regression).
    pub primary: f64,
    /// KL term (classification) or log-variance term (regression).
    pub regularizer: f64,
    /// Batch mean of per-sample harmonic-mean sigma.
    pub sigma_bar: f64,
    /// Log-variance entries clamped in the regression loss.
    pub clamped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,primary,regularizer,sigma_bar,clamped\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.step, s.lr, s.loss, s.primary, s.regularizer, s.sigma_bar, s.clamped
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub classifier: ClassifierWeights,
    pub log: TrainLog,
}

fn batch_sigma_bar(sigma: &Matrix) -> f64 {
    let total: f64 = sigma
        .iter_rows()
        .map(|row| harmonic_mean(row).unwrap_or(f64::NAN))
        .sum();
    total / sigma.rows as f64
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ClsMode {
    Baseline,
    Stochastic,
}

fn train_classifier(
    ds: &SyntheticIdentityDataset,
    mut model: EncoderModel,
    mut w: ClassifierWeights,
    cfg: &TrainConfig,
    mode: ClsMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let LossKind::Classification(loss_cfg) = cfg.loss else {
        return Err(DulError::Contract(
            "classification training needs a classification loss".into(),
        ));
    };
    if w.num_classes() < ds.num_classes || w.dim() != model.embed_dim() {
        return Err(DulError::Contract("classifier does not match dataset / model".into()));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&y| y >= w.num_classes()) {
        return Err(DulError::LabelOutOfRange {
            label: bad,
            num_classes: w.num_classes(),
        });
    }
    let mut sampler = BatchSampler::new(ds.len(), cfg.seed);
    let mut eps_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eps_rng.set_stream(2);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    let d = model.embed_dim();

    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step)?;
        let idx = sampler.next(cfg.batch_size);
        let x = gather_rows(&ds.inputs, &idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let fwd = model.forward(&x)?;
        let mut sigma = fwd.raw.clone();
        sigma.data.iter_mut().for_each(|r| *r = (0.5 * *r).exp());

        let eps = match mode {
            ClsMode::Baseline => None,
            ClsMode::Stochastic if cfg.zero_eps => Some(Matrix::zeros(idx.len(), d)),
            ClsMode::Stochastic => Some(Matrix::from_vec(
                idx.len(),
                d,
                (0..idx.len() * d)
                    .map(|_| StandardNormal.sample(&mut eps_rng))
                    .collect(),
            )),
        };
        let out = cls_total_loss(
            ClsBatch {
                mu: &fwd.mu,
                sigma: &sigma,
                eps: eps.as_ref(),
                labels: &labels,
            },
            &w,
            &loss_cfg,
        )?;
        if !out.total.is_finite() {
            return Err(DulError::Diverged { step, value: out.total });
        }
        // d sigma / d r = sigma / 2
        let mut grad_raw = out.grad_sigma;
        for (g, s) in grad_raw.data.iter_mut().zip(&sigma.data) {
            *g *= 0.5 * s;
        }
        let grads = model.backward(&fwd, &out.grad_mu, &grad_raw);
        let mut grad_slices = grads.slices();
        grad_slices.push(&out.grad_w);
        let mut params = model.param_slices_mut();
        params.push(w.as_mut_slice());
        opt.step(params, &grad_slices, lr);

        log.steps.push(StepRecord {
            step,
            lr,
            loss: out.total,
            primary: out.softmax,
            regularizer: out.kl,
            sigma_bar: batch_sigma_bar(&sigma),
            clamped: 0,
        });
    }
    Ok(TrainOutcome {
        model,
        classifier: w,
        log,
    })
}

/// Deterministic baseline: the classifier sees `s = mu`, no KL term.
pub fn train_baseline(
    ds: &SyntheticIdentityDataset,
    model: EncoderModel,
    w: ClassifierWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_classifier(ds, model, w, cfg, ClsMode::Baseline)
}

/// Stochastic-embedding classification: softmax over `mu + eps * sigma`
/// plus `lambda` times the KL regularizer. All parameters, including the
/// classifier, are updated.
pub fn train_dul_cls(
    ds: &SyntheticIdentityDataset,
    model: EncoderModel,
    w: ClassifierWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_classifier(ds, model, w, cfg, ClsMode::Stochastic)
}

/// Heteroscedastic regression of the model heads onto per-row targets.
///
/// Trunk parameters are updated only when the model's trunk is not frozen.
pub fn fit_regression(
    inputs: &Matrix,
    targets: &Matrix,
    mut model: EncoderModel,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainLog)> {
    cfg.validate()?;
    if inputs.rows != targets.rows || inputs.rows == 0 {
        return Err(DulError::Contract(
            "inputs and targets must be non-empty and aligned".into(),
        ));
    }
    let mut sampler = BatchSampler::new(inputs.rows, cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    let skip = if model.frozen_trunk {
        model.trunk_slice_count()
    } else {
        0
    };
    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step)?;
        let idx = sampler.next(cfg.batch_size);
        let x = gather_rows(inputs, &idx);
        let t = gather_rows(targets, &idx);
        let fwd = model.forward(&x)?;
        let out = batch_nll(&fwd.mu, &fwd.raw, &t)?;
        if !out.value.is_finite() {
            return Err(DulError::Diverged { step, value: out.value });
        }
        let grads = model.backward(&fwd, &out.grad_mu, &out.grad_r);
        let grad_slices = grads.slices();
        let params: Vec<&mut [f64]> = model.param_slices_mut().into_iter().skip(skip).collect();
        opt.step(params, &grad_slices[skip..], lr);

        let mut sigma = fwd.raw;
        sigma
            .data
            .iter_mut()
            .for_each(|r| *r = (0.5 * r.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)).exp());
        log.steps.push(StepRecord {
            step,
            lr,
            loss: out.value,
            primary: out.residual_term,
            regularizer: out.logvar_term,
            sigma_bar: batch_sigma_bar(&sigma),
            clamped: out.clamped,
        });
    }
    Ok((model, log))
}

/// Class centers in the space the encoder's `mu` lives in.
///
/// Normalizing softmax variants only see the direction of `w_c`, so their
/// centers are unit columns, scaled by the model's `mu_norm` when set.
pub fn class_center_targets(
    w: &ClassifierWeights,
    softmax: &SoftmaxConfig,
    mu_norm: Option<f64>,
) -> Result<ClassifierWeights> {
    if softmax.variant == SoftmaxVariant::Plain {
        return Ok(w.clone());
    }
    let unit = w.normalized()?;
    let c = mu_norm.unwrap_or(1.0);
    let data = unit.as_slice().iter().map(|v| v * c).collect();
    ClassifierWeights::new(w.dim(), w.num_classes(), data)
}

/// Second stage of regression-based uncertainty learning: freezes the
/// pretrained trunk, re-initializes both heads and regresses `mu` onto the
/// class center `w_{y_i}` of each sample with a learned variance.
pub fn train_dul_rgs(
    ds: &SyntheticIdentityDataset,
    pretrained: &EncoderModel,
    targets: &ClassifierWeights,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainLog)> {
    if !matches!(cfg.loss, LossKind::Regression) {
        return Err(DulError::Contract("dul-rgs training needs the regression loss".into()));
    }
    if targets.dim() != pretrained.embed_dim() {
        return Err(DulError::Contract("target dimension does not match the model".into()));
    }
    let mut model = pretrained.clone();
    model.frozen_trunk = true;
    model.reset_heads(cfg.seed ^ 0x5eed_4ead);
    let mut t = Matrix::zeros(ds.len(), targets.dim());
    for (i, &y) in ds.labels.iter().enumerate() {
        if y >= targets.num_classes() {
            return Err(DulError::LabelOutOfRange {
                label: y,
                num_classes: targets.num_classes(),
            });
        }
        t.row_mut(i).copy_from_slice(targets.column(y));
    }
    fit_regression(&ds.inputs, &t, model, cfg)
}

/// Fraction of samples whose margin-free class score argmax on `mu`
/// matches the label.
pub fn classification_accuracy(
    model: &EncoderModel,
    w: &ClassifierWeights,
    softmax: &SoftmaxConfig,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    let preds = predict_labels(model, w, softmax, inputs)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

pub fn predict_labels(
    model: &EncoderModel,
    w: &ClassifierWeights,
    softmax: &SoftmaxConfig,
    inputs: &Matrix,
) -> Result<Vec<usize>> {
    let (mu, _) = model.embed(inputs)?;
    mu.iter_rows().map(|row| predict_class(row, w, softmax)).collect()
}

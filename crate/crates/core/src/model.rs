//! Small MLP encoder with a shared trunk and two affine heads.
//!
//! The trunk is a stack of `affine -> tanh` layers. Both heads read the same
//! trunk output: the mean head produces `mu`, the uncertainty head produces
//! the raw log-variance `r` (`sigma = exp(r / 2)`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::harmonic_mean;
use crate::error::{ensure_len, DulError, Result};
use crate::linalg::{dot, norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    /// Weights uniform in `+-1/sqrt(in_dim)`, bias constant.
    pub fn init(in_dim: usize, out_dim: usize, bias: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![bias; out_dim],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows, self.out_dim);
        for i in 0..x.rows {
            let xi = x.row(i);
            let oi = out.row_mut(i);
            for (o, (wrow, b)) in oi.iter_mut().zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias)) {
                let mut acc = *b;
                for (w, v) in wrow.iter().zip(xi) {
                    acc += w * v;
                }
                *o = acc;
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`
    /// when `want_input` is set.
    fn backward(&self, x: &Matrix, grad_out: &Matrix, grad: &mut AffineGrad, want_input: bool) -> Option<Matrix> {
        for i in 0..x.rows {
            let xi = x.row(i);
            let gi = grad_out.row(i);
            for (o, &g) in gi.iter().enumerate() {
                grad.bias[o] += g;
                let gw = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (w, v) in gw.iter_mut().zip(xi) {
                    *w += g * v;
                }
            }
        }
        if !want_input {
            return None;
        }
        let mut gx = Matrix::zeros(x.rows, self.in_dim);
        for i in 0..x.rows {
            let gi = grad_out.row(i);
            let gxi = gx.row_mut(i);
            for (wrow, &g) in self.weight.chunks_exact(self.in_dim).zip(gi) {
                for (a, w) in gxi.iter_mut().zip(wrow) {
                    *a += g * w;
                }
            }
        }
        Some(gx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineGrad {
    fn zeros_like(a: &Affine) -> Self {
        Self {
            weight: vec![0.0; a.weight.len()],
            bias: vec![0.0; a.bias.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_trunk_layers")]
    pub trunk_layers: usize,
    pub embed_dim: usize,
    /// Initial bias of the log-variance head (`r = -2` gives `sigma ~ 0.37`).
    #[serde(default = "default_sigma_bias")]
    pub sigma_bias_init: f64,
    /// When set, every `mu` row is rescaled to this l2 norm. Stands in for
    /// the batch-normalized output layer of larger encoders, which keeps the
    /// embedding scale from growing without bound.
    #[serde(default)]
    pub mu_norm: Option<f64>,
}

fn default_hidden() -> usize {
    64
}
fn default_trunk_layers() -> usize {
    2
}
fn default_sigma_bias() -> f64 {
    -2.0
}

impl ModelConfig {
    pub fn new(input_dim: usize, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: default_hidden(),
            trunk_layers: default_trunk_layers(),
            embed_dim,
            sigma_bias_init: default_sigma_bias(),
            mu_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.embed_dim == 0 || self.trunk_layers == 0 {
            return Err(DulError::Contract("model dimensions must be >= 1".into()));
        }
        if !self.sigma_bias_init.is_finite() {
            return Err(DulError::Contract("sigma_bias_init must be finite".into()));
        }
        if let Some(c) = self.mu_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(DulError::Contract("mu_norm must be finite and > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub trunk: Vec<Affine>,
    pub mu_head: Affine,
    pub sigma_head: Affine,
    pub frozen_trunk: bool,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[k + 1]` is the output
    /// of trunk layer `k` after tanh.
    activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        self.activations.last().expect("non-empty cache")
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub mu: Matrix,
    /// Mean head output before the optional rescaling.
    pub mu_raw: Matrix,
    /// Raw log-variance head output.
    pub raw: Matrix,
    pub cache: ForwardCache,
}

/// Gradients laid out like [`EncoderModel::param_slices`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub trunk: Vec<AffineGrad>,
    pub mu_head: AffineGrad,
    pub sigma_head: AffineGrad,
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.trunk {
            out.push(g.weight.as_slice());
            out.push(g.bias.as_slice());
        }
        for g in [&self.mu_head, &self.sigma_head] {
            out.push(g.weight.as_slice());
            out.push(g.bias.as_slice());
        }
        out
    }
}

impl EncoderModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(config.trunk_layers);
        let mut in_dim = config.input_dim;
        for _ in 0..config.trunk_layers {
            trunk.push(Affine::init(in_dim, config.hidden, 0.0, &mut rng));
            in_dim = config.hidden;
        }
        let mu_head = Affine::init(config.hidden, config.embed_dim, 0.0, &mut rng);
        let sigma_head = Affine::init(config.hidden, config.embed_dim, config.sigma_bias_init, &mut rng);
        Ok(Self {
            config,
            trunk,
            mu_head,
            sigma_head,
            frozen_trunk: false,
        })
    }

    /// Replaces both heads with freshly initialized ones.
    pub fn reset_heads(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.config;
        self.mu_head = Affine::init(c.hidden, c.embed_dim, 0.0, &mut rng);
        self.sigma_head = Affine::init(c.hidden, c.embed_dim, c.sigma_bias_init, &mut rng);
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn features(&self, x: &Matrix) -> Result<ForwardCache> {
        ensure_len("input dim", self.config.input_dim, x.cols)?;
        let mut activations = Vec::with_capacity(self.trunk.len() + 1);
        activations.push(x.clone());
        for layer in &self.trunk {
            let mut h = layer.forward(activations.last().expect("input present"));
            h.data.iter_mut().for_each(|v| *v = v.tanh());
            activations.push(h);
        }
        Ok(ForwardCache { activations })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        let cache = self.features(x)?;
        let h = cache.features();
        let mu_raw = self.mu_head.forward(h);
        let mu = match self.config.mu_norm {
            None => mu_raw.clone(),
            Some(c) => {
                let mut mu = mu_raw.clone();
                for i in 0..mu.rows {
                    let row = mu.row_mut(i);
                    let n = norm(row);
                    if n == 0.0 {
                        return Err(DulError::ZeroNorm("mean head output"));
                    }
                    row.iter_mut().for_each(|v| *v *= c / n);
                }
                mu
            }
        };
        Ok(Forward {
            mu,
            mu_raw,
            raw: self.sigma_head.forward(h),
            cache,
        })
    }

    /// `(mu, sigma)` for every input row.
    pub fn embed(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let f = self.forward(x)?;
        let mut sigma = f.raw;
        sigma.data.iter_mut().for_each(|r| *r = (0.5 * *r).exp());
        Ok((f.mu, sigma))
    }

    /// Harmonic-mean sigma per input row.
    pub fn uncertainty(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (_, sigma) = self.embed(x)?;
        sigma.iter_rows().map(harmonic_mean).collect()
    }

    /// Backpropagates head-output gradients. Trunk gradients stay zero when
    /// the trunk is frozen.
    pub fn backward(&self, fwd: &Forward, grad_mu: &Matrix, grad_raw: &Matrix) -> ModelGrads {
        let h = fwd.cache.features();
        let mut grads = ModelGrads {
            trunk: self.trunk.iter().map(AffineGrad::zeros_like).collect(),
            mu_head: AffineGrad::zeros_like(&self.mu_head),
            sigma_head: AffineGrad::zeros_like(&self.sigma_head),
        };
        let want = !self.frozen_trunk;
        let rescaled;
        let grad_mu = match self.config.mu_norm {
            None => grad_mu,
            Some(c) => {
                // y = c u / |u|  =>  dL/du = (c / |u|) (g - y_hat (y_hat . g))
                let mut g = grad_mu.clone();
                for i in 0..g.rows {
                    let u = fwd.mu_raw.row(i);
                    let n = norm(u);
                    let proj = dot(u, grad_mu.row(i)) / (n * n);
                    for (gv, uv) in g.row_mut(i).iter_mut().zip(u) {
                        *gv = (c / n) * (*gv - uv * proj);
                    }
                }
                rescaled = g;
                &rescaled
            }
        };
        let gh_mu = self.mu_head.backward(h, grad_mu, &mut grads.mu_head, want);
        let gh_sig = self.sigma_head.backward(h, grad_raw, &mut grads.sigma_head, want);
        let (Some(mut gh), Some(gs)) = (gh_mu, gh_sig) else {
            return grads;
        };
        for (a, b) in gh.data.iter_mut().zip(&gs.data) {
            *a += b;
        }
        for k in (0..self.trunk.len()).rev() {
            let out = &fwd.cache.activations[k + 1];
            for (g, a) in gh.data.iter_mut().zip(&out.data) {
                *g *= 1.0 - a * a;
            }
            let input = &fwd.cache.activations[k];
            match self.trunk[k].backward(input, &gh, &mut grads.trunk[k], k > 0) {
                Some(next) => gh = next,
                None => break,
            }
        }
        grads
    }

    /// Parameter buffers in declaration order: each trunk layer's weight
    /// then bias, the mean head, then the uncertainty head.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in self.trunk.iter().chain([&self.mu_head, &self.sigma_head]) {
            out.push(layer.weight.as_slice());
            out.push(layer.bias.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.trunk.iter_mut().chain([&mut self.mu_head, &mut self.sigma_head]) {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    /// Number of leading entries of [`Self::param_slices`] owned by the trunk.
    pub fn trunk_slice_count(&self) -> usize {
        2 * self.trunk.len()
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

//! Diagonal Gaussian embeddings and reparameterized sampling.
//!
//! An embedding is a pair `(mu, sigma)` describing `N(mu, diag(sigma^2))`.
//! Samples are drawn as `s = mu + eps * sigma` with `eps` supplied by the
//! caller, so every draw is reproducible and can be injected in tests.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, DulError, Result};

/// `N(mu, diag(sigma^2))` in a `D`-dimensional latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        ensure_len("sigma", mu.len(), sigma.len())?;
        if mu.is_empty() {
            return Err(DulError::Contract("embedding dimension must be >= 1".into()));
        }
        check_positive_sigma(&sigma)?;
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(DulError::Contract("mu must be finite".into()));
        }
        Ok(Self { mu, sigma })
    }

    /// Builds an embedding from a mean and raw log-variance head output.
    pub fn from_log_variance(mu: Vec<f64>, raw: &[f64]) -> Result<Self> {
        Self::new(mu, sigma_from_raw(raw)?)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// A reparameterized draw together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledEmbedding {
    pub s: Vec<f64>,
    pub eps: Vec<f64>,
}

/// How the uncertainty head output is mapped to a positive `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaParameterization {
    /// Head predicts `r = ln sigma^2`; `sigma = exp(r / 2)`.
    #[default]
    LogVarianceExp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub dim: usize,
    #[serde(default)]
    pub sigma_parameterization: SigmaParameterization,
}

impl LatentConfig {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(DulError::Contract("latent dim must be >= 1".into()));
        }
        Ok(Self {
            dim,
            sigma_parameterization: SigmaParameterization::LogVarianceExp,
        })
    }
}

/// `s = mu + eps * sigma`, element-wise.
pub fn sample_embedding(g: &GaussianEmbedding, eps: &[f64]) -> Result<SampledEmbedding> {
    ensure_len("eps", g.dim(), eps.len())?;
    let s =
        g.mu.iter()
            .zip(&g.sigma)
            .zip(eps)
            .map(|((m, sd), e)| m + e * sd)
            .collect();
    Ok(SampledEmbedding { s, eps: eps.to_vec() })
}

/// Scalar uncertainty summary `D / sum(1 / sigma_l)`.
pub fn harmonic_mean_sigma(g: &GaussianEmbedding) -> f64 {
    harmonic_mean(&g.sigma).expect("GaussianEmbedding sigma is validated at construction")
}

/// Harmonic mean of a strictly positive vector.
pub fn harmonic_mean(sigma: &[f64]) -> Result<f64> {
    if sigma.is_empty() {
        return Err(DulError::Contract("harmonic mean of empty vector".into()));
    }
    check_positive_sigma(sigma)?;
    let inv: f64 = sigma.iter().map(|s| 1.0 / s).sum();
    Ok(sigma.len() as f64 / inv)
}

/// Maps raw log-variance outputs `r` to `sigma = exp(r / 2)`.
pub fn sigma_from_raw(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(DulError::Contract("raw log-variance must be finite".into()));
    }
    Ok(raw.iter().map(|r| (0.5 * r).exp()).collect())
}

fn check_positive_sigma(sigma: &[f64]) -> Result<()> {
    match sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
        Some(l) => Err(DulError::Contract(format!(
            "sigma[{l}] = {} is not strictly positive and finite",
            sigma[l]
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn g(mu: &[f64], sigma: &[f64]) -> GaussianEmbedding {
        GaussianEmbedding::new(mu.to_vec(), sigma.to_vec()).unwrap()
    }

    // Independent scalar evaluator: index loop, no iterator zip.
    fn sample_loop(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; mu.len()];
        for l in 0..mu.len() {
            out[l] = mu[l] + eps[l] * sigma[l];
        }
        out
    }

    #[test]
    fn sample_examples() {
        let s = sample_embedding(&g(&[1.0, 2.0], &[0.5, 0.5]), &[0.0, 0.0]).unwrap();
        assert_eq!(s.s, vec![1.0, 2.0]);
        let s = sample_embedding(&g(&[0.0, 0.0], &[1.0, 1.0]), &[1.0, -1.0]).unwrap();
        assert_eq!(s.s, vec![1.0, -1.0]);
        let s = sample_embedding(&g(&[1.0, 2.0], &[0.5, 2.0]), &[2.0, -1.0]).unwrap();
        assert_eq!(s.s, sample_loop(&[1.0, 2.0], &[0.5, 2.0], &[2.0, -1.0]));
        assert_eq!(s.s, vec![2.0, 0.0]);
        assert_eq!(s.eps, vec![2.0, -1.0]);
    }

    #[test]
    fn sample_rejects_dimension_mismatch() {
        let err = sample_embedding(&g(&[1.0, 2.0], &[1.0, 1.0]), &[0.0]).unwrap_err();
        assert!(matches!(err, DulError::DimensionMismatch { .. }));
    }

    #[test]
    fn construction_rejects_bad_sigma() {
        assert!(GaussianEmbedding::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianEmbedding::new(vec![0.0], vec![-1.0]).is_err());
        assert!(GaussianEmbedding::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(GaussianEmbedding::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(GaussianEmbedding::new(vec![], vec![]).is_err());
        assert!(LatentConfig::new(0).is_err());
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_abs_diff_eq!(harmonic_mean_sigma(&g(&[0.0; 3], &[0.5; 3])), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            harmonic_mean_sigma(&g(&[0.0; 2], &[1.0, 0.5])),
            2.0 / (1.0 + 2.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(harmonic_mean_sigma(&g(&[0.0; 4], &[1.0; 4])), 1.0, epsilon = 1e-15);
        assert!(harmonic_mean(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn sigma_from_raw_examples() {
        assert_eq!(sigma_from_raw(&[0.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        assert_abs_diff_eq!(sigma_from_raw(&[4f64.ln()]).unwrap()[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sigma_from_raw(&[-2.0 * 2f64.ln()]).unwrap()[0], 0.5, epsilon = 1e-15);
        assert!(sigma_from_raw(&[f64::NAN]).is_err());
    }

    #[test]
    fn empirical_moments_converge() {
        let mu = [0.3, -1.2, 2.0];
        let sigma = [0.5, 1.5, 0.1];
        let emb = g(&mu, &sigma);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s = sample_embedding(&emb, &eps).unwrap().s;
            for l in 0..3 {
                sum[l] += s[l];
                sum_sq[l] += s[l] * s[l];
            }
        }
        for l in 0..3 {
            let m = sum[l] / n as f64;
            let var = sum_sq[l] / n as f64 - m * m;
            assert!((m - mu[l]).abs() < 3.0 * sigma[l] / (n as f64).sqrt());
            assert!((var.sqrt() / sigma[l] - 1.0).abs() < 0.05);
        }
    }

    fn vec_strategy(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(lo..hi, len)
    }

    proptest! {
        #[test]
        fn sampling_is_affine_in_eps(
            (mu, sigma, e1, e2) in (1usize..8).prop_flat_map(|d| (
                vec_strategy(d, -3.0, 3.0),
                vec_strategy(d, 0.01, 3.0),
                vec_strategy(d, -3.0, 3.0),
                vec_strategy(d, -3.0, 3.0),
            )),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let emb = g(&mu, &sigma);
            let combo: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = sample_embedding(&emb, &combo).unwrap().s;
            let s1 = sample_embedding(&emb, &e1).unwrap().s;
            let s2 = sample_embedding(&emb, &e2).unwrap().s;
            for l in 0..mu.len() {
                let rhs = alpha * s1[l] + beta * s2[l] - (alpha + beta - 1.0) * mu[l];
                prop_assert!((lhs[l] - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn harmonic_mean_is_scale_equivariant(
            sigma in proptest::collection::vec(0.01f64..10.0, 1..16),
            k in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = sigma.iter().map(|s| k * s).collect();
            let h = harmonic_mean(&sigma).unwrap();
            let hk = harmonic_mean(&scaled).unwrap();
            prop_assert!((hk - k * h).abs() <= 1e-12 * hk.abs().max(1.0));
        }

        #[test]
        fn sigma_from_raw_inverts_twice_log(sigma in proptest::collection::vec(1e-3f64..1e3, 1..16)) {
            let raw: Vec<f64> = sigma.iter().map(|s| 2.0 * s.ln()).collect();
            let back = sigma_from_raw(&raw).unwrap();
            for (a, b) in sigma.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-12 * a);
            }
        }
    }
}

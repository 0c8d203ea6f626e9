//! Synthetic data with ground-truth noise.
//!
//! Identity data: class centers on the unit sphere of the input space,
//! samples are `center + N(0, base_noise^2 I)`. Corruption adds a further
//! isotropic Gaussian to a seeded subset and raises each affected sample's
//! recorded noise level to `sqrt(old^2 + scale^2)`.
//!
//! Streams: the class centers always come from ChaCha stream 0 of the
//! spec's seed; samples come from stream `1 + sample_stream`, so extra
//! splits with the same identities are cheap to draw.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DulError, Result};
use crate::linalg::{dot, norm, Matrix};

const MAX_CENTER_ATTEMPTS: usize = 100_000;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    /// Minimum pairwise angle between class centers, in degrees.
    pub center_spread: f64,
    pub base_noise: f64,
    pub seed: u64,
    /// Selects an independent sample split drawn around the same centers.
    #[serde(default)]
    pub sample_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub fraction: f64,
    pub scale: f64,
    pub seed: u64,
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub identities: IdentitySpec,
    #[serde(default)]
    pub corruptions: Vec<CorruptionSpec>,
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<SyntheticIdentityDataset> {
        let mut ds = gen_identities(&self.identities)?;
        for c in &self.corruptions {
            ds = corrupt_fraction(&ds, c.fraction, c.scale, c.seed)?;
        }
        Ok(ds)
    }

    /// Hex SHA-256 prefix of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentityDataset {
    pub spec: GeneratorSpec,
    pub num_classes: usize,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub noise_levels: Vec<f64>,
}

impl SyntheticIdentityDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols
    }

    /// Samples whose noise level exceeds the smallest level in the set.
    pub fn corrupted_mask(&self) -> Vec<bool> {
        let min = self.noise_levels.iter().cloned().fold(f64::INFINITY, f64::min);
        self.noise_levels.iter().map(|&n| n > min).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let cols = self.inputs.cols;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        Self {
            spec: self.spec.clone(),
            num_classes: self.num_classes,
            inputs: Matrix::from_vec(idx.len(), cols, data),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            noise_levels: idx.iter().map(|&i| self.noise_levels[i]).collect(),
        }
    }
}

/// Unit-norm class centers with pairwise angle at least `min_angle_deg`.
pub fn class_centers(num_classes: usize, dim: usize, min_angle_deg: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let max_cos = min_angle_deg.to_radians().cos();
    let mut rng = stream_rng(seed, 0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut attempts = 0;
    while centers.len() < num_classes {
        attempts += 1;
        if attempts > MAX_CENTER_ATTEMPTS {
            return Err(DulError::Infeasible(format!(
                "could not place {num_classes} centers in {dim} dims at >= {min_angle_deg} degrees"
            )));
        }
        let mut v = gaussian_vec(&mut rng, dim);
        let n = norm(&v);
        if n == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        if centers.iter().all(|c| dot(c, &v) <= max_cos) {
            centers.push(v);
        }
    }
    Ok(centers)
}

pub fn gen_identities(spec: &IdentitySpec) -> Result<SyntheticIdentityDataset> {
    if spec.num_classes < 2 || spec.per_class < 2 {
        return Err(DulError::Contract("need num_classes >= 2 and per_class >= 2".into()));
    }
    if spec.input_dim == 0 {
        return Err(DulError::Contract("input_dim must be >= 1".into()));
    }
    if !(spec.base_noise.is_finite() && spec.base_noise >= 0.0) {
        return Err(DulError::Contract("base_noise must be finite and >= 0".into()));
    }
    if !(0.0..=180.0).contains(&spec.center_spread) {
        return Err(DulError::Contract("center_spread must be an angle in [0, 180]".into()));
    }
    let centers = class_centers(spec.num_classes, spec.input_dim, spec.center_spread, spec.seed)?;
    let mut rng = stream_rng(spec.seed, 1 + spec.sample_stream);
    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let noise = gaussian_vec(&mut rng, spec.input_dim);
            data.extend(center.iter().zip(&noise).map(|(m, e)| m + spec.base_noise * e));
            labels.push(c);
        }
    }
    Ok(SyntheticIdentityDataset {
        spec: GeneratorSpec {
            identities: spec.clone(),
            corruptions: Vec::new(),
        },
        num_classes: spec.num_classes,
        inputs: Matrix::from_vec(n, spec.input_dim, data),
        labels,
        noise_levels: vec![spec.base_noise; n],
    })
}

/// Corrupts exactly `round(fraction * N)` seeded samples with additive
/// `N(0, scale^2 I)` noise. Labels are never touched.
pub fn corrupt_fraction(
    ds: &SyntheticIdentityDataset,
    fraction: f64,
    scale: f64,
    seed: u64,
) -> Result<SyntheticIdentityDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DulError::Contract("corruption fraction must be in [0, 1]".into()));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(DulError::Contract("corruption scale must be finite and >= 0".into()));
    }
    let mut out = ds.clone();
    out.spec.corruptions.push(CorruptionSpec { fraction, scale, seed });
    let count = (fraction * ds.len() as f64 + 0.5).floor() as usize;
    if count == 0 || scale == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample_indices(&mut rng, ds.len(), count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let noise = gaussian_vec(&mut rng, ds.input_dim());
        for (x, e) in out.inputs.row_mut(i).iter_mut().zip(&noise) {
            *x += scale * e;
        }
        let old = out.noise_levels[i];
        out.noise_levels[i] = (old * old + scale * scale).sqrt();
    }
    Ok(out)
}

/// Scalar function of `x` used for regression ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FnSpec {
    /// `intercept + slope * x`
    Affine { intercept: f64, slope: f64 },
    /// `offset + amplitude * sin(frequency * x)`
    Sine {
        offset: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl FnSpec {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            FnSpec::Affine { intercept, slope } => intercept + slope * x,
            FnSpec::Sine {
                offset,
                amplitude,
                frequency,
            } => offset + amplitude * (frequency * x).sin(),
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            FnSpec::Affine { intercept, slope } => intercept.is_finite() && slope.is_finite(),
            FnSpec::Sine {
                offset,
                amplitude,
                frequency,
            } => offset.is_finite() && amplitude.is_finite() && frequency.is_finite(),
        }
    }
}

/// 1-D regression data `y = f(x) + eps * sigma(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HetRegDataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub f: FnSpec,
    pub sigma: FnSpec,
    pub range: (f64, f64),
    pub seed: u64,
}

impl HetRegDataset {
    pub fn inputs(&self) -> Matrix {
        Matrix::from_vec(self.x.len(), 1, self.x.clone())
    }

    pub fn targets(&self) -> Matrix {
        Matrix::from_vec(self.y.len(), 1, self.y.clone())
    }
}

pub fn gen_hetreg(n: usize, f: FnSpec, sigma: FnSpec, range: (f64, f64), seed: u64) -> Result<HetRegDataset> {
    if n < 10 {
        return Err(DulError::Contract("hetreg needs n >= 10".into()));
    }
    if !(range.0.is_finite() && range.1.is_finite() && range.0 < range.1) {
        return Err(DulError::Contract("invalid x range".into()));
    }
    if !(f.is_finite() && sigma.is_finite()) {
        return Err(DulError::Contract("non-finite function spec".into()));
    }
    // Both ends of an affine / sine noise law are checked plus a fine grid.
    let grid_ok = (0..=1000).all(|k| {
        let x = range.0 + (range.1 - range.0) * k as f64 / 1000.0;
        sigma.eval(x) >= 0.0
    });
    if !grid_ok {
        return Err(DulError::Contract("sigma(x) must be non-negative on the range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = Uniform::new(range.0, range.1).map_err(|e| DulError::Contract(e.to_string()))?;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = uniform.sample(&mut rng);
        let e: f64 = StandardNormal.sample(&mut rng);
        xs.push(x);
        ys.push(f.eval(x) + e * sigma.eval(x));
    }
    Ok(HetRegDataset {
        x: xs,
        y: ys,
        f,
        sigma,
        range,
        seed,
    })
}

//! Flat binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "DULCKPT\0"
//! version          u32      1
//! mode             u32      0 baseline, 1 dul-cls, 2 dul-rgs
//! seed             u64
//! input_dim        u32
//! hidden           u32
//! trunk_layers     u32
//! embed_dim        u32
//! num_classes      u32
//! flags            u32      bit 0 sigma head trained, bit 1 trunk frozen,
//!                           bit 2 normalize_features, bit 3 classifier normalized
//! softmax variant  u32      0 plain, 1 am-softmax, 2 arcface, 3 l2-softmax
//! margin           f64
//! scale            f64
//! sigma_bias_init  f64
//! mu_norm          f64      0 when the mean head is not rescaled
//! parameters       f64 * P  trunk layers (weight, bias), mu head, sigma head,
//!                           then classifier columns
//! ```
//!
//! Layer weights are `out x in`, row-major.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DulError, Result};
use crate::losses::{ClassifierWeights, SoftmaxConfig, SoftmaxVariant};
use crate::model::{EncoderModel, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DULCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Baseline,
    DulCls,
    DulRgs,
}

impl RunMode {
    fn code(self) -> u32 {
        match self {
            RunMode::Baseline => 0,
            RunMode::DulCls => 1,
            RunMode::DulRgs => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => RunMode::Baseline,
            1 => RunMode::DulCls,
            2 => RunMode::DulRgs,
            _ => return Err(DulError::Format(format!("unknown run mode {code}"))),
        })
    }

    /// Whether the uncertainty head carries learned values.
    pub fn has_sigma(self) -> bool {
        !matches!(self, RunMode::Baseline)
    }
}

fn variant_code(v: SoftmaxVariant) -> u32 {
    match v {
        SoftmaxVariant::Plain => 0,
        SoftmaxVariant::AmSoftmax => 1,
        SoftmaxVariant::Arcface => 2,
        SoftmaxVariant::L2Softmax => 3,
    }
}

fn variant_from_code(code: u32) -> Result<SoftmaxVariant> {
    Ok(match code {
        0 => SoftmaxVariant::Plain,
        1 => SoftmaxVariant::AmSoftmax,
        2 => SoftmaxVariant::Arcface,
        3 => SoftmaxVariant::L2Softmax,
        _ => return Err(DulError::Format(format!("unknown softmax variant {code}"))),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: RunMode,
    pub seed: u64,
    pub model: EncoderModel,
    pub classifier: ClassifierWeights,
    pub softmax: SoftmaxConfig,
}

impl Checkpoint {
    pub fn has_sigma(&self) -> bool {
        self.mode.has_sigma()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = &self.model.config;
        if self.classifier.dim() != cfg.embed_dim {
            return Err(DulError::DimensionMismatch {
                what: "classifier dim",
                expected: cfg.embed_dim,
                actual: self.classifier.dim(),
            });
        }
        let mut out = Vec::with_capacity(64 + 8 * (self.model.num_params() + self.classifier.as_slice().len()));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.mode.code());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for d in [
            cfg.input_dim,
            cfg.hidden,
            cfg.trunk_layers,
            cfg.embed_dim,
            self.classifier.num_classes(),
        ] {
            put_u32(&mut out, dim_u32(d)?);
        }
        let mut flags = 0u32;
        if self.mode.has_sigma() {
            flags |= 1;
        }
        if self.model.frozen_trunk {
            flags |= 2;
        }
        if self.softmax.normalize_features {
            flags |= 4;
        }
        if self.classifier.is_normalized() {
            flags |= 8;
        }
        put_u32(&mut out, flags);
        put_u32(&mut out, variant_code(self.softmax.variant));
        for v in [
            self.softmax.margin,
            self.softmax.scale,
            cfg.sigma_bias_init,
            cfg.mu_norm.unwrap_or(0.0),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in self.model.param_slices() {
            put_f64s(&mut out, s);
        }
        put_f64s(&mut out, self.classifier.as_slice());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(DulError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DulError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mode = RunMode::from_code(r.u32()?)?;
        let seed = r.u64()?;
        let input_dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let trunk_layers = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let flags = r.u32()?;
        let variant = variant_from_code(r.u32()?)?;
        let margin = r.f64()?;
        let scale = r.f64()?;
        let sigma_bias_init = r.f64()?;
        let mu_norm = r.f64()?;

        let config = ModelConfig {
            input_dim,
            hidden,
            trunk_layers,
            embed_dim,
            sigma_bias_init,
            mu_norm: (mu_norm != 0.0).then_some(mu_norm),
        };
        config.validate()?;
        let mut model = EncoderModel::new(config, 0)?;
        model.frozen_trunk = flags & 2 != 0;
        for s in model.param_slices_mut() {
            r.fill_f64s(s)?;
        }
        let mut w = vec![0.0; embed_dim * num_classes];
        r.fill_f64s(&mut w)?;
        let mut classifier = ClassifierWeights::new(embed_dim, num_classes, w)?;
        if flags & 8 != 0 {
            classifier = classifier.normalized()?;
        }
        if r.pos != bytes.len() {
            return Err(DulError::Format(format!(
                "{} trailing bytes after checkpoint parameters",
                bytes.len() - r.pos
            )));
        }
        if mode.has_sigma() != (flags & 1 != 0) {
            return Err(DulError::Format("sigma flag disagrees with run mode".into()));
        }
        let softmax = SoftmaxConfig {
            variant,
            margin,
            scale,
            normalize_features: flags & 4 != 0,
        };
        softmax.validate()?;
        Ok(Self {
            mode,
            seed,
            model,
            classifier,
            softmax,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| DulError::Format(format!("dimension {d} does not fit in u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DulError::Format(format!(
                "truncated input: wanted {n} bytes at offset {}",
                self.pos
            ))),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn fill_f64s(&mut self, out: &mut [f64]) -> Result<()> {
        for v in out {
            *v = self.f64()?;
        }
        Ok(())
    }
}

//! Data uncertainty learning for discriminative embeddings.
//!
//! Two ways of learning a per-sample Gaussian embedding `N(mu, sigma^2)`:
//!
//! * **classification** ([`train::train_dul_cls`]): a margin softmax over a
//!   reparameterized sample `mu + eps * sigma`, regularized by the KL
//!   divergence to `N(0, I)`;
//! * **regression** ([`train::train_dul_rgs`]): a heteroscedastic Gaussian
//!   likelihood of the classifier's class centers given the input, on top
//!   of a frozen, pretrained trunk.
//!
//! The crate also carries the evaluation side (cosine / mutual likelihood
//! scores, ROC, rank-1), synthetic data with known noise, diagnostic
//! analyses, and the on-disk formats used by the `dul` command line tool.

pub mod analysis;
pub mod checkpoint;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{DulError, Result};

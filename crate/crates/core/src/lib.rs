//! Multi-task AI-generated-text detector at desk scale.
//!
//! The crate is organised around a small hand-rolled reverse-mode autodiff
//! kernel ([`numcore`]), a hashed byte-trigram encoder with four classification
//! heads ([`model`]), the composite training objective ([`losses`], [`trainer`]),
//! a text perturbation suite ([`attacks`]), low-FPR evaluation ([`metrics`],
//! [`evalpipe`]) and a synthetic corpus generator ([`synth`]).
//!
//! The numeric kernel is generic over the scalar type; everything downstream
//! runs on the `f64` aliases exported here because checkpoints store 64-bit
//! floats.

pub mod attacks;
pub mod corpus;
pub mod evalpipe;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod synth;
pub mod trainer;

use thiserror::Error;

/// Scalar type every numeric kernel routine is generic over.
///
/// `f32` and `f64` both qualify; the rest of the crate pins `f64` via the
/// [`Real`] alias.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Concrete scalar used by the model, trainer and evaluation pipeline.
pub type Real = f64;
/// Row-major matrix over [`Real`].
pub type Tensor = numcore::Tensor2<Real>;
/// Recording tape over [`Real`].
pub type Tape = numcore::Tape<Real>;

/// Crate-wide error type. Variants are grouped loosely by the module that
/// raises them; everything bubbles up through [`Result`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{path}:{line}: {detail}")]
    CorpusParse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("mixture spec invalid: {0}")]
    Mixture(String),
    #[error("synonym attack requires a lexicon but none is configured")]
    MissingLexicon,
    #[error("checkpoint invalid: {0}")]
    Checkpoint(String),
    #[error("metric input invalid: {0}")]
    Metric(String),
    #[error("training failed: {0}")]
    Train(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Ceiling of a fraction-of-count product, with the product snapped to the
/// nearest integer when within 1e-9 of it. Counting rules of the form
/// "ceil(rate x n)" hit float artifacts otherwise: 0.05 * 20 evaluates to
/// 1.0000000000000002 and would ceil to 2, and (1 - 0.01) * 100 to 100
/// instead of 99.
pub(crate) fn ceil_with_snap(product: f64) -> usize {
    let nearest = product.round();
    if (product - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        product.ceil() as usize
    }
}

/// FNV-1a 64-bit hash. Used for feature hashing, dedup keys and derived
/// per-row RNG seeds, so it must stay stable across releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

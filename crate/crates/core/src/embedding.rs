//! Unit-norm embeddings and the backends that produce them.
//!
//! Three sources exist: a deterministic stub that hashes payload bytes into a
//! Gaussian direction, a precomputed table keyed by frame id, and a registry
//! that dispatches by backend name. External model backends plug in through
//! [`EmbeddingBackend`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Embedding dimension used when no configuration overrides it.
pub const DEFAULT_DIM: usize = 256;

/// Tolerance on the L2 norm of any [`Embedding`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("unknown embedding backend `{0}`")]
    UnknownBackend(String),
    #[error("frame `{0}` has an empty payload")]
    EmptyPayload(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("vector is not unit norm (norm {0})")]
    NotUnitNorm(f64),
    #[error("no precomputed embedding for frame `{0}`")]
    MissingEmbedding(String),
}

/// A unit-norm real vector. Construct through [`normalize`] or
/// [`Embedding::from_unit`].
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Arc<[f64]>);

impl Embedding {
    /// Wraps a vector that is already unit norm (within [`UNIT_NORM_TOLERANCE`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnitNorm(norm));
        }
        Ok(Embedding(values.into()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    /// Cosine similarity; for unit vectors this is the dot product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        euclidean(&self.0, &other.0)
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), EmbeddingError> {
        if self.dim() != expected {
            return Err(EmbeddingError::DimensionMismatch { expected, actual: self.dim() });
        }
        Ok(())
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl fmt::Debug for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.0.iter().take(4).collect();
        write!(f, "Embedding(dim={}, head={:?})", self.dim(), head)
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::from_unit(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.to_vec()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn l2_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * v.iter().map(|x| (x / scale) * (x / scale)).sum::<f64>().sqrt()
}

/// Returns `v / ||v||`. Rejects zero and non-finite input instead of guessing.
pub fn normalize(v: &[f64]) -> Result<Embedding, EmbeddingError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite);
    }
    // Pre-scaling by the max magnitude keeps the squared sum from overflowing.
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / scale).collect();
    let norm = scaled.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(Embedding(scaled.into_iter().map(|x| x / norm).collect()))
}

/// One captured frame: opaque bytes plus identity and capture time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePayload {
    pub frame_id: String,
    #[serde(with = "crate::b64")]
    pub bytes: Vec<u8>,
    pub captured_at: i64,
}

impl FramePayload {
    pub fn new(frame_id: impl Into<String>, bytes: impl Into<Vec<u8>>, captured_at: i64) -> Self {
        FramePayload { frame_id: frame_id.into(), bytes: bytes.into(), captured_at }
    }
}

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, payload: &FramePayload) -> Result<Embedding, EmbeddingError>;
}

/// Hash-seeded Gaussian direction: a pure function of `(seed, bytes)`.
#[derive(Clone, Debug)]
pub struct DeterministicStub {
    seed: u64,
    dim: usize,
}

impl DeterministicStub {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        DeterministicStub { seed, dim }
    }

    pub fn embed_bytes(&self, bytes: &[u8]) -> Result<Embedding, EmbeddingError> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(bytes);
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let raw: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&raw)
    }
}

impl EmbeddingBackend for DeterministicStub {
    fn name(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, payload: &FramePayload) -> Result<Embedding, EmbeddingError> {
        if payload.bytes.is_empty() {
            return Err(EmbeddingError::EmptyPayload(payload.frame_id.clone()));
        }
        self.embed_bytes(&payload.bytes)
    }
}

/// Embeddings computed elsewhere, looked up by frame id and re-normalized.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedSource {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedSource {
    pub fn new(dim: usize) -> Self {
        PrecomputedSource { dim, vectors: BTreeMap::new() }
    }

    pub fn insert(&mut self, frame_id: impl Into<String>, values: Vec<f64>) -> Result<(), EmbeddingError> {
        if values.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch { expected: self.dim, actual: values.len() });
        }
        self.vectors.insert(frame_id.into(), values);
        Ok(())
    }

    pub fn contains(&self, frame_id: &str) -> bool {
        self.vectors.contains_key(frame_id)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn lookup(&self, frame_id: &str) -> Result<Embedding, EmbeddingError> {
        let v = self
            .vectors
            .get(frame_id)
            .ok_or_else(|| EmbeddingError::MissingEmbedding(frame_id.to_string()))?;
        if v.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch { expected: self.dim, actual: v.len() });
        }
        normalize(v)
    }
}

impl EmbeddingBackend for PrecomputedSource {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, payload: &FramePayload) -> Result<Embedding, EmbeddingError> {
        self.lookup(&payload.frame_id)
    }
}

/// Named backends sharing one dimension.
pub struct BackendRegistry {
    dim: usize,
    backends: BTreeMap<String, Box<dyn EmbeddingBackend>>,
}

impl BackendRegistry {
    pub fn new(dim: usize) -> Self {
        BackendRegistry { dim, backends: BTreeMap::new() }
    }

    /// Registry holding the stub under `"stub"` and an empty precomputed table
    /// under `"precomputed"`.
    pub fn with_defaults(seed: u64, dim: usize) -> Self {
        let mut reg = BackendRegistry::new(dim);
        reg.register(Box::new(DeterministicStub::new(seed, dim)))
            .expect("stub dimension matches registry");
        reg.register(Box::new(PrecomputedSource::new(dim)))
            .expect("precomputed dimension matches registry");
        reg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn register(&mut self, backend: Box<dyn EmbeddingBackend>) -> Result<(), EmbeddingError> {
        if backend.dim() != self.dim {
            return Err(EmbeddingError::DimensionMismatch { expected: self.dim, actual: backend.dim() });
        }
        self.backends.insert(backend.name().to_string(), backend);
        Ok(())
    }

    pub fn embed(&self, payload: &FramePayload, backend: &str) -> Result<Embedding, EmbeddingError> {
        let b = self
            .backends
            .get(backend)
            .ok_or_else(|| EmbeddingError::UnknownBackend(backend.to_string()))?;
        if payload.bytes.is_empty() && backend != "precomputed" {
            return Err(EmbeddingError::EmptyPayload(payload.frame_id.clone()));
        }
        let e = b.embed(payload)?;
        e.check_dim(self.dim)?;
        Ok(e)
    }
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendRegistry")
            .field("dim", &self.dim)
            .field("backends", &self.backends.keys().collect::<Vec<_>>())
            .finish()
    }
}

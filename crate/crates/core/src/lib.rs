//! Egocentric context engine: low-shot context and face recognition over frame
//! embeddings, geolocation-partitioned clustering of unlabeled frames, a
//! labeling queue that turns clusters into classes, and just-in-time reminder
//! rules. Everything runs offline over replayed or synthetic streams.

pub mod b64;
pub mod cluster;
pub mod config;
pub mod detection;
pub mod emb_format;
pub mod embedding;
pub mod exec;
pub mod face;
pub mod imprint;
pub mod labeling;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod record;
pub mod replay;
pub mod store;
pub mod synth;
pub mod trigger;

/// Reserved label for rejected predictions; never a valid class or person.
pub const UNKNOWN_LABEL: &str = "<unknown>";

pub use embedding::{normalize, Embedding, EmbeddingError, FramePayload};
pub use exec::ExecMode;

//! Memory-retrieval anomaly detection.
//!
//! Auxiliary-domain features are stored in a two-level feature-label memory
//! ([`membank`]); query images are scored by softmax retrieval against it
//! ([`retrieval`], [`scoring`]), optionally through learned query/key maps
//! ([`finetune`]), and evaluated with the usual detection metrics ([`eval`]).

mod codec;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod membank;
pub mod pack;
pub mod persist;
pub mod retrieval;
pub mod scoring;
pub mod synth;
pub mod types;

pub use codec::write_atomic;
pub use error::{Error, ErrorKind, Result};
pub use types::{
    AnomalyMap, Bitmap, DatasetStats, HeadWeights, ImageRecord, Label, MemoryBank, MetricWeights,
    PatchGrid, RetrievalParams,
};

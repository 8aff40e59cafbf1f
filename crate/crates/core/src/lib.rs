//! Build domain-specific dense retrievers by interpolating checkpoint weights.
//!
//! A retrieval model and a domain-adapted model sharing one architecture are
//! blended tensor by tensor: transformer layers below a boundary use one
//! coefficient, layers at or above it use another, and the token embedding is
//! taken unchanged from the retrieval model. The surrounding modules supply
//! everything needed to pick the two coefficients empirically:
//!
//! * [`tensor_store`]: the `MRG1` single-file checkpoint format.
//! * [`merge`]: layer classification and the interpolation itself.
//! * [`encoder`]: a small deterministic transformer bi-encoder whose weights
//!   live in a [`TensorArchive`], so merged checkpoints can be run.
//! * [`retrieval`]: corpus/query/qrels ingestion, exact dense search, BM25,
//!   and hard-negative mining.
//! * [`evaluation`]: nDCG@k, aggregate statistics, and the paired t-test.
//! * [`experiment`]: coefficient grid search, dev-query resampling, and
//!   report rendering.

pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod merge;
pub mod retrieval;
pub mod tensor_store;

pub use error::{Error, Result};
pub use merge::{merge_archives, LayerPartition, MergeSpec, NonlayerPolicy, SegmentAssignment};
pub use tensor_store::{Tensor, TensorArchive};

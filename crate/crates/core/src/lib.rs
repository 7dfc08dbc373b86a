//! Fixed-length visit embeddings learned from free-text notes and structured
//! events.
//!
//! A hybrid network (a word-level CNN over the concatenated notes and a
//! two-layer perceptron over time-summed structured features) is trained to
//! predict 19 diagnosis-chapter labels. The concatenation of the two hidden
//! representations (256 + 192 = 448 values) is the visit embedding. The
//! embeddings are then checked two ways: a multi-output random forest trained
//! on them, and centroid-difference cosines between tag-defined groups.

pub mod corpus;
pub mod error;
pub mod featurize;
pub mod forest;
pub mod hybridnet;
pub mod metrics;
pub mod numcore;
pub mod probe;
pub mod seed;

pub use error::{Error, Result};

/// Number of diagnosis-chapter labels per stay.
pub const N_LABELS: usize = 19;

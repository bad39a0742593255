//! Confidence-guided token merging for transformer blocks.
//!
//! A per-token confidence map picks the least confident groups of image
//! tokens; those groups are averaged into single tokens before each
//! attention/MLP module and replicated back afterwards. Attention logits of
//! merged keys receive a `ln n` bias so that a merged key carries the
//! attention mass of the `n` tokens it replaces.

pub mod block;
pub mod error;
pub mod layout;
pub mod mask;
pub mod merge;
pub mod metrics;
pub mod predictor;
pub mod rng;
pub mod scan;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use layout::{LayoutDescriptor, PatchGrid, TokenSequence};
pub use mask::{ConfidenceMap, ConfidenceSource, MergeMask};
pub use rng::Rng;
pub use tensor::DenseTensor;

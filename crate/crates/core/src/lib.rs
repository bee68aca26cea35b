//! Latent sentence-structure induction and graph reasoning for
//! summarization, in portable `no_std` Rust.
//!
//! Sentences of a document are scored as parent/child/root candidates and
//! the matrix-tree theorem turns those scores into marginal adjacency and
//! root probabilities. Graph blocks pass messages over the induced
//! structure, and a small encoder-decoder attends over the resulting node
//! states before it attends over tokens.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod diff;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod mtc;
pub mod params;
pub mod reasoning;

pub use corpus::{Example, SynthSpec, Vocabulary};
pub use diff::{CompGraph, GradStore, NodeId};
pub use linalg::Matrix;
pub use model::{Model, ModelConfig};
pub use mtc::{LatentGraph, ScoreSet, SentenceStates};
pub use params::ParamStore;
pub use reasoning::{Mode, StackConfig};

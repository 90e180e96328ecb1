//! Sentence-level language modeling over frozen sentence vectors, with
//! matching- and decoder-based surface realization, token-level baselines,
//! synthetic corpora and evaluation harnesses.

pub mod baseline;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod realization;
pub mod ssr;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{AttentionMask, Segment, Tape, Var};
pub use tensor::Tensor;

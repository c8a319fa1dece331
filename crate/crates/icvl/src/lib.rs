//! Desk-scale toolkit for intention-conditioned long-term action
//! anticipation.
//!
//! The crate implements every mechanism of the approach at a size that runs
//! hermetically on one core: a dense double-precision kernel with tape-based
//! differentiation and finite-difference verification, intention-context
//! attention fusion, a toy Transformer recognizer, the sequential
//! intention-inference loop against pluggable vision-language clients,
//! multimodal example selection, prompt construction and parsing, a LoRA-
//! adapted autoregressive decoder, and both evaluation protocols (min-over-K
//! normalized edit distance; multi-label mAP over percentage horizons with
//! FREQ/RARE splits). Synthetic intention-grammar fixtures stand in for the
//! real benchmarks, and large pretrained models stay behind client traits.
//!
//! Start with the runnable examples (`cargo run --example full_pipeline`) or
//! the `icvl` binary, which fronts each stage as a subcommand.

pub mod autodiff;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gradcheck;
pub mod icaf;
pub mod intention;
pub mod io;
pub mod matrix;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod recognizer;
pub mod retrieval;
pub mod verify;

pub use error::{IcvlError, Result};
pub use matrix::EmbeddingMatrix;
pub use recognizer::{ActionLabel, Vocabulary};

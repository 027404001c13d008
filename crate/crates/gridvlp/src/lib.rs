//! Grid-feature vision-language pretraining workbench.
//!
//! One transformer encoder consumes a CNN grid-feature sequence concatenated
//! with text embeddings; a shared-parameter decoder runs in two modes,
//! predicting an object set from learned queries and generating captions
//! left to right. Four pretraining losses (masked language modeling,
//! image-text matching, detection, captioning) train the whole stack end to
//! end on a synthetic shapes corpus small enough to overfit in minutes.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod matching;
pub mod model;
pub mod nn;
pub mod ops_nn;
pub mod plot;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;
pub mod vision;

pub use error::{Error, Result};

/// Entry point used by the `gridvlp` binary; returns a process exit code.
pub fn cli_main() -> i32 {
    cli::run()
}

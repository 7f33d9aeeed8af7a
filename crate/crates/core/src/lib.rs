//! Multimodal decoding (MMD) for interleaved text and numbers.
//!
//! An encoder-decoder transformer in which every number is embedded by a
//! small MLP instead of being split into digit tokens. A routing head decides
//! per position whether the decoder state goes to the text head or to the
//! number head. The crate also carries the experiment harness around it:
//! question/answer generators, tokenizers for the baselines, training with a
//! composite loss, and the regression/F1 metric suite.

pub mod error;
pub mod cli;
pub mod datagen;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
pub mod textnum;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub struct Tensors;
    #[doc = include_str!("../../../book/src/numbers.md")]
    pub struct Numbers;
    #[doc = include_str!("../../../book/src/datagen.md")]
    pub struct Datagen;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
    #[doc = include_str!("../../../book/src/acceptance.md")]
    pub struct Acceptance;
}

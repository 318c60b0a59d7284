//! Target-content speech recognition: transcribe the utterance that contains
//! a given keyword out of mixed or concatenated multi-talker speech.
//!
//! The crate contains everything from the numeric engine up:
//!
//! - [`tensor`], [`autodiff`], [`optim`]: a small deterministic reverse-mode
//!   autodiff engine with Adam and a warmup schedule.
//! - [`frontend`]: log-mel features, context splicing, subsampling.
//! - [`corpus`]: a synthetic multi-speaker corpus with exact alignments, and
//!   the mixing / concatenation / keyword / pivot machinery that turns it into
//!   training and test examples.
//! - [`model`]: keyword encoder + cross-attention-biased speech encoder.
//! - [`ctc`], [`metrics`]: CTC loss, greedy decoding, phone error rate.
//! - [`harness`]: training, checkpoint averaging, evaluation grids and trend
//!   comparison.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;

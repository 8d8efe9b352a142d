//! Desk-scale abstractive summarization with transformer encoder-decoders.
//!
//! The crate covers the whole pipeline: a small autodiff tensor kernel,
//! a BPE tokenizer, an encoder-decoder transformer, checkpoint assembly
//! (random or warm-started from an MLM-pretrained encoder), training,
//! greedy/beam decoding, ROUGE evaluation, corpus handling, and an
//! experiment harness that ties them together.

pub mod rng;
pub mod tensor;
pub mod model;
pub mod tokenizer;
pub mod assembly;
pub mod rouge;
pub mod decoding;
pub mod corpus;
pub mod training;
pub mod harness;

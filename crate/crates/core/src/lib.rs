//! A desk-scale laboratory for conditional question rewriting.
//!
//! Two model families turn a short, bland question into a more detailed,
//! engaging one: a GRU encoder/decoder with additive attention, and a
//! single-stack prefix-LM transformer whose layer normalization can be
//! conditioned on a side feature vector (an image-feature surrogate).
//! Everything runs on a hand-rolled reverse-mode tensor tape, with the
//! dataset pipeline, BLEU/ROUGE scoring, and judgment aggregation needed
//! to compare the two.

pub mod features;
pub mod gru;
pub mod jsonl;
pub mod metrics;
pub mod params;
pub mod tensor;
pub mod text;
pub mod training;
pub mod transformer;

pub use tensor::{Graph, NodeId, TensorError};

/// Decoding strategy shared by both model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

//! Minimal differentiable-array engine and the Transformer pieces built on
//! it: encoder/decoder blocks, a BPE tokenizer and the Adam optimizer.
//!
//! Everything runs in `f64` on the CPU, single-threaded per model instance.

pub mod adam;
pub mod array;
pub mod bpe;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod transformer;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use array::{argmax, log_softmax, softmax, Array};
pub use bpe::BpeTokenizer;
pub use error::{NnError, Result};
pub use graph::{Graph, Perturbation, Pooling, SegPair, Segment, Var};
pub use params::{ParamGrads, ParamId, ParamRecord, ParamStore, Parameter};
pub use transformer::{
    decoder_forward, encoder_forward, teacher_forcing, Decoder, Encoder, Packed, ParamSource, Seq2Seq,
    TransformerConfig,
};

//! Word-level tokenizer, a small pre-norm decoder-only transformer with
//! role-tagged weights, and decoding.
//!
//! Two forward paths share one set of weights: [`graph`] records the pass on
//! a tape for training, [`Decoder`] runs it with key/value caches for
//! evaluation. Both compute the same function.

pub mod checkpoint;
mod config;
mod generate;
pub mod graph;
mod infer;
mod vocab;
pub mod weights;

pub use checkpoint::{load_model, save_model, ModelManifest, TensorRecord};
pub use config::TransformerConfig;
pub use generate::{
    beam_decode, beam_generate, decode, greedy_decode, greedy_generate, perplexity,
    perplexity_of, stream_nll, GenerationSettings, Strategy,
};
pub use graph::{loss_on_tape, logits_on_tape, Batch, BoundAdapters, BoundLora, BoundParams};
pub use infer::{forward_logits, Decoder, KvCache};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, NL, PAD, PUNCTUATION, RESERVED, UNK};
pub use weights::{layout, names, MatrixRole, ModelWeights, WeightEntry};

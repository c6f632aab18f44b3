//! Sequence-to-sequence text generation with two interchangeable output
//! layers: a conventional linear-softmax generator and a word embedding
//! attention generator that scores candidate word embeddings against a
//! query vector.

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{clip_global_norm, Activation, Gradients, Graph, Var};
pub use model::{CandidateSet, GeneratorKind, ModelConfig, Seq2SeqModel};
pub use nn::{Mode, ScoreKind};
pub use tensor::{Param, ParamId, ParamStore, Tensor};

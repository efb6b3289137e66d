//! Differentiable-computation kernel: tensors, a reverse-mode tape, the
//! LSTM sequence encoder and the AdamW optimizer.

pub mod gradcheck;
mod graph;
mod lstm;
pub mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, ParamGrads, Var};
pub use lstm::{encode_sequence, SeqEncoder};
pub use optim::{adamw_step, OptimConfig};
pub use params::{read_checkpoint, write_checkpoint, ParamId, ParameterStore};
pub use tensor::Tensor;

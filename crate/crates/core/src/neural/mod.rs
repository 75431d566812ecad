//! Minimal differentiable numeric layer: arrays, a reverse-mode tape,
//! stacked GRU cells, embeddings and Adam.

mod adam;
mod array;
mod layers;
mod params;
mod tape;

pub use adam::AdamState;
pub use array::Array;
pub use layers::{embed, embed_var, gru_stack_forward, sequence_log_prob, GruLayer, GruStack, INIT_BOUND};
pub use params::{ParamId, ParameterSet};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::rms;

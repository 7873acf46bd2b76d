//! The decoder-only transformer: config, weights, vocabulary, file format and
//! the traced forward pass.

mod config;
mod forward;
mod io;
mod vocab;
mod weights;

pub use config::{is_known_tensor_name, Activation, ModelConfig, PositionalScheme};
pub use forward::{
    ForwardOutput, HiddenTrace, Intervention, LayerTrace, PatchTarget, PositionRule, ResidualCache, Transformer,
};
pub(crate) use forward::{causal_softmax, RopeTable};
pub use io::{decode, encode, load_weights, save_weights, VERSION as WEIGHT_FORMAT_VERSION};
pub use vocab::{TokenSequence, Vocab, ARROW, NEWLINE, QUERY_MARKER};
pub use weights::{BlockLayout, Layout, MlpLayout, ModelWeights, Tensor};

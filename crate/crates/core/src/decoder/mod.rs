//! Tiny decoder-only transformer with a word-level vocabulary, multimodal
//! prompt assembly and query/value LoRA adapters.

mod forward;
mod params;
mod sequence;
mod vocab;

pub use forward::{
    backward, embed_inputs, forward, forward_cached, loss, loss_and_grad, ForwardCache, GradNeeds, Gradients,
};
pub use params::{
    Block, DecoderConfig, DecoderParams, LayerNorm, LoraAdapters, LoraConfig, LoraLayer, LoraPair, ParamGroup,
    Tensor, TensorMut,
};
pub use sequence::{assemble_prompt, assemble_with_prefix, MultimodalSequence, Slot};
pub use vocab::*;

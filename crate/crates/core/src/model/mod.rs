//! Seeded decoder-only multimodal toy transformer.
//!
//! Each layer follows the residual form
//! `H̄ = MHA(H) + H`, `H' = FFN(H̄) + H̄`, and the output head is
//! `φ(H) = H·W_out + b`. Visual tokens form a contiguous prefix and text
//! tokens follow.

mod forward;
mod weights;

pub(crate) use forward::{attend, position_layer, recombine};
pub use forward::{
    encode_inputs, forward_step, greedy_decode, visual_token, DecodeSession, LayerTrace, StepOutput, TokenStream,
};
pub use weights::{build_model, LayerWeights, ModelConfig, ModelWeights, MAGIC, OUTPUT_SCALE};

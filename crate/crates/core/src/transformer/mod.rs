//! Decoder-only transformer interpreter.
//!
//! Attention logits are the raw products `(W^Q h_i)ᵀ(W^K h_j)` over `j ≤ i`
//! with no `1/√d` scaling. With the imaginary timestep enabled a constant
//! zero logit with a zero value vector joins every softmax, so a head can
//! attend to nothing.

mod encode;
mod forward;
mod params;

pub use encode::{decode_task, encode_context, encode_task, DecodedTask};
pub use forward::{forward, HiddenTrace, Model};
pub use params::{HeadParams, LayerParams, ResidualMode, TransformerParams};

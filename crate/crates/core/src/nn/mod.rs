//! Minimal dense layers with explicit backward passes.
//!
//! Activations are `(rows, width)` matrices. Sequence models treat each run of
//! `tokens` consecutive rows as one sample, so a batch of `B` samples with `T`
//! feature tokens is a `(B*T, k)` matrix.

mod attention;
mod block;
mod layers;
pub(crate) mod params;

pub use attention::{Attention, AttentionCache};
pub use block::{Block, BlockCache, Stack, StackCache};
pub use layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
pub use params::{ParamMut, ParamView, Params};

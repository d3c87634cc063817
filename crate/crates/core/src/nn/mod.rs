//! Layers shared by victims and defenders.

mod attention;
mod embed;
mod ffn;
mod linear;
mod pixel_shuffle;

pub use attention::{transformer_forward, Arrangement, TransformerConfig, TransformerLayer};
pub use embed::{patch_index, PatchEmbedding};
pub use ffn::{Activation, FeedForward};
pub use linear::{LayerNorm, Linear};
pub use pixel_shuffle::PixelShuffleDecoder;

//! Text and vision encoders producing the shared d-dimensional embedding
//! space, plus the transformer blocks they are assembled from.

pub mod blocks;
pub mod text;
pub mod tokenizer;
pub mod vision;

pub use blocks::{AttentionParams, LayerNormParams, MlpParams, TransformerBlock};
pub use text::TextEncoder;
pub use tokenizer::{build_vocab, Tokenizer};
pub use vision::{patchify, VisionEncoder, VisionFeatures, CHANNELS};

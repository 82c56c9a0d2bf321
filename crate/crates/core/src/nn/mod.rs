//! Small neural-network toolkit on top of candle tensors.

pub mod attention;
pub mod layers;
pub mod ops;
pub mod params;
pub mod transformer;

pub use attention::{Attended, MultiHeadAttention};
pub use layers::{Conv2d, ConvTranspose2d, Embedding, FeedForward, LayerNorm, Linear};
pub use ops::Ctx;
pub use params::{Init, Param, ParamBuilder, ParamStore};
pub use transformer::{DecoderLayer, EncoderLayer};

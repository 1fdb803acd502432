//! The toy stand-in for a latent diffusion backbone: analytic codec, prompt
//! embedder and a small text-conditioned UNet with its training loop.

mod attention;
mod checkpoint;
pub mod codec;
pub mod params;
pub mod prompt;
pub mod train;
pub mod unet;

pub use attention::attention;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use codec::{decode, encode, LATENT_SHAPE};
pub use prompt::{tokenize, PromptEmbedding, TokenId, NULL_TOKEN};
pub use train::{train_base, TrainBaseConfig, TrainReport};
pub use unet::{
    AttnKind, AttnSite, BlockId, ForwardHooks, LoraVars, ModelConfig, NoHooks, Projection, Stage,
    UNetModel, DECODER_LAYERS,
};

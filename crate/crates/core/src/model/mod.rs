//! The VQA network `f(image, question) -> p`: region masking, convolutional
//! image encoder, recurrent question encoder, multi-glimpse attention,
//! concatenation fusion and an MLP classifier.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamEntry};
pub use config::{parse_kv, ConvStage, Fusion, ModelConfig};
pub use network::{
    apply_mask, encode_tokens, AttentionOutput, ForwardOutput, ModelInput, ParamIndex, VqaModel,
};

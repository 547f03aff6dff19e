//! Self-supervised encoders for the rearing-chamber frames: a vision
//! transformer and a compact residual CNN trained with contrastive learning
//! through time, and a masked video autoencoder.

pub mod cltt;
pub mod cnn;
pub mod data;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod train;
pub mod videomae;
pub mod vit;

pub use cltt::{cltt_loss, window_groups, EmbeddingBatch};
pub use cnn::{train_cnn, Cnn, CnnConfig};
pub use data::{patchify, Images};
pub use encoder::{encode_frames, Encoder};
pub use error::{ModelError, Result};
pub use train::{CheckpointSink, Contrastive, TrainConfig, TrainLog};
pub use videomae::{mask_tubes, train_videomae, MaeConfig, MaskedClip, VideoMae};
pub use vit::{train_vit_cot, ViT, ViTConfig};

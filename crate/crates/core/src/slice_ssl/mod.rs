//! Self-supervised pretraining of the slice encoder: two augmented views per
//! slice, a projection head, and the normalized-temperature cross-entropy
//! objective with in-batch negatives.

pub mod augment;
pub mod encoder;
pub mod loss;
pub mod pretrain;

pub use augment::{augment_pair, AugmentConfig};
pub use encoder::{encode_batch, encode_slice, encode_stack, Activation, ConvBlock, EncoderConfig, ENCODER_PREFIX};
pub use loss::{nt_xent_graph, nt_xent_loss};
pub use pretrain::{pretrain_slice_encoder, PretrainOutcome, SslConfig, StepLoss};

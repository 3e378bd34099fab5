//! Desk-scale multimodal pretraining for CT volumes and clinical numeric data.
//!
//! The pipeline preprocesses CT volumes into slice stacks, pretrains a small
//! convolutional slice encoder with a two-view contrastive objective, pools
//! slice embeddings per patient with attention-based multiple-instance
//! pooling, encodes clinical features with an MLP, aligns the two modalities
//! with a symmetric in-batch contrastive loss, and evaluates the result with
//! linear probes and few-shot sampling.

pub mod align;
pub mod cli;
pub mod clinical_encoder;
pub mod ct_preprocess;
pub mod error;
pub mod eval_probe;
mod fsio;
pub mod mil_pool;
pub mod numerics;
pub mod slice_ssl;
pub mod synth_data;

pub use error::{Error, Result};

//! Confidence-weighted contrastive pre-training for relation extraction.
//!
//! The pipeline builds distantly supervised data from an annotated dataset,
//! scores each distant instance with a classifier trained on the annotated
//! data, pre-trains a small transformer encoder with a confidence-weighted
//! bag contrastive loss plus masked language modeling, and fine-tunes and
//! evaluates on the annotated data.

pub mod config;
pub mod data_model;
pub mod ds_builder;
pub mod encoder;
pub mod error;
pub mod finetune_eval;
pub mod optim;
pub mod par;
pub mod pretrain;
pub mod reliability;
pub mod seed;
pub mod text;
pub mod wcl;

pub use error::{Error, Result};

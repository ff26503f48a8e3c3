//! A small trainable transformer encoder with exact gradients.
//!
//! Word-level vocabulary, entity-marker sequence construction, a
//! pre-layer-norm transformer (multi-head scaled dot-product attention,
//! GELU feed-forward), the concatenated begin-marker instance
//! representation, an MLM head and a classification head. Everything is
//! double precision.

pub mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod vocab;

pub use batch::{classifier_batch, mlm_batch};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use model::{
    backward, classifier_logits, encode, forward, instance_representation, mark_instance, mlm_forward,
    MarkedSequence, MaskedExample,
};
pub use params::{EncoderConfig, EncoderParameters};
pub use vocab::{build_vocabulary, Vocabulary};

#[cfg(test)]
pub(crate) mod tests;

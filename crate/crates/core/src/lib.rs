//! Multi-channel self-attentive classifier over sparse and dense social-media
//! feature channels, with its few-shot training framework (mixup, feature
//! sampling, channel dropout, masked-feature self-supervision, silver-label
//! weak supervision), a synthetic population generator with a Bayes oracle,
//! and an evaluation harness.

pub mod dataset;
pub mod embed;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod par;
pub mod pretrain;
pub mod schema;
pub mod simgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{AttentionVariant, Checkpoint, ModelParams};
pub use schema::{ChannelSchema, ChannelizedUser, LabeledDataset, Vocabulary};

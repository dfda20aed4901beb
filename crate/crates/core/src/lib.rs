//! Joint intent detection and slot filling on a Transformer encoder.
//!
//! A sentence-level classifier reads the hidden state of the sequence-start
//! token and a token-level classifier tags every word in IOB format. Both
//! heads share the encoder and are trained together on a weighted sum of
//! their cross-entropies whose weights are themselves learned.
//!
//! The crate is organized bottom-up:
//!
//! - [`encoder`]: embeddings, multi-head self-attention and the layer stack.
//! - [`heads`]: intent and slot classifiers, decoding and the joint loss.
//! - [`trainer`]: gradients, Adam, the fine-tuning loop, MLM pretraining and
//!   gradient checking.
//! - [`data`]: the three-file dataset format, vocabulary, subsets, merging and
//!   annotation projection.
//! - [`metrics`]: span F1, intent accuracy and sentence accuracy.
//! - [`archive`]: saving and loading trained models.
//! - [`cli`]: the `joint-slu` command-line front end.

pub mod archive;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod params;
pub mod trainer;

pub use archive::{EncoderArchive, ModelArchive};
pub use data::{DatasetSplit, LabeledExample, Vocabulary};
pub use encoder::{encode, ModelConfig, TokenIds};
pub use error::{Error, Result};
pub use heads::{LabelMaps, LossWeights, TrainMode};
pub use metrics::{evaluate, EvalOptions, MetricsReport, Predictor};
pub use params::JointParams;
pub use trainer::{train, TrainConfig, TrainOptions};

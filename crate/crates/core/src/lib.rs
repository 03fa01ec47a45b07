//! Zero-shot semantic segmentation by matching text queries against vision
//! transformer patch embeddings, trainable end-to-end on a synthetic
//! compositional shape world.
//!
//! The crate is organized bottom-up:
//!
//! - [`value`] / [`graph`]: dense tensors and tape-based reverse-mode autodiff
//! - [`params`]: named parameter store and the binary weight checkpoint format
//! - [`encoder`]: small ViT image encoder with frozen / fine-tuned / deep
//!   prompt tuning update regimes
//! - [`text`]: class embedding bank, image-text matching, and the
//!   relationship-descriptor query formats
//! - [`decoder`]: transformer decoder producing per-class mask logits from
//!   scaled dot-product scores, plus upsampling and argmax prediction
//! - [`losses`]: exclusive cross-entropy and the non-mutually-exclusive
//!   focal/dice family with ignore-index masking
//! - [`metrics`]: confusion matrix, pAcc, seen/unseen mIoU, harmonic IoU
//! - [`data`]: synthetic compositional dataset generation and persistence
//! - [`model`] / [`optim`] / [`trainer`]: the assembled segmentation model,
//!   AdamW, and the inductive / transductive / supervised training loops

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod graph;
pub mod params;
pub mod text;
pub mod trainer;
pub mod value;

#[cfg(test)]
pub(crate) mod testsupport;

pub use data::{Dataset, GenRegime, SampleRecord, WorldSpec, IGNORE_INDEX};
pub use decoder::{DecoderConfig, MaskDecoder};
pub use encoder::{EncoderConfig, PromptConfig, Regime, ViTEncoder};
pub use error::{Error, Result};
pub use graph::{Graph, Tensor};
pub use losses::{LossConfig, LossMode, TargetPlanes};
pub use model::{ModelConfig, SegModel};
pub use optim::{AdamW, OptimState};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use params::{BoundParams, ParamId, ParamStore};
pub use text::{ClassEmbeddingBank, QueryFormat};
pub use trainer::{TrainConfig, TrainMode, TrainOutcome};
pub use value::Value;

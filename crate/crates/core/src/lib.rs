//! Hierarchical side-tuning of a frozen plain ViT.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – dense tensors and a tape-based reverse-mode autodiff.
//! * [`backbone`] – frozen ViT with trainable meta tokens and LayerNorm tuning.
//! * [`bridge`] – per-stage shared projections splitting each backbone tap into
//!   meta-global tokens and a fine-grained spatial map.
//! * [`side_net`] – the four-stage hierarchical side network.
//! * [`model`] – assembly, classification/pyramid forwards, parameter accounting.
//! * [`trainer`], [`data`], [`diagnostics`], [`checkpoint`], [`config`], [`cli`].

pub mod backbone;
pub mod bridge;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod model;
pub mod param;
pub mod side_net;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, RunConfig};
pub use data::Dataset;
pub use error::{HstError, Result};
pub use model::{HstModel, ParamReport};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::{DType, Element, Graph, Tensor, Var};
pub use trainer::Trainer;

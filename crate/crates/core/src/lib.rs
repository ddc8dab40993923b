//! Multimodal listwise re-ranking of search candidate lists.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`params`], [`gradcheck`]: dense `f64` tensors with
//!   define-by-run reverse-mode gradients.
//! - [`data`]: the session data model, a seeded synthetic generator and the
//!   dataset file format.
//! - [`encoders`]: embedding lookups and target attention over behavior history.
//! - [`model`]: context-aware modality fusion, field-wise transformer encoders
//!   and the listwise conversion / pointwise click heads.
//! - [`train`]: losses, AdaGrad, the epoch loop and checkpoints.
//! - [`eval`]: AUC, the ablation runner and fusion-weight dumps.
//! - [`cli`]: the `armmt` command-line entry point.

pub mod cli;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{DataError, TensorError};
pub use graph::{Activation, Graph, Var};
pub use params::{Gradients, ParamStore, Parameter};
pub use tensor::Tensor;

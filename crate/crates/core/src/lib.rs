//! Query-based object detection with frozen foundation encoders as
//! plug-in feature enhancers.
//!
//! A frozen mini-ViT runs beside the detector backbone. Its class token
//! (and optional local class tokens) become *image queries* that join the
//! object queries in every decoder self-attention and are dropped right
//! after; its patch tokens become an extra pyramid level that the
//! deformable encoder fuses and then discards.

pub mod boxes;
pub mod data;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod foundation;
pub mod gradcheck;
pub mod imaging;
pub mod kernels;
pub mod matching;
pub mod nn;
pub mod optim;
pub mod pnm;
pub mod pretrain;
pub mod param;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::Tensor;

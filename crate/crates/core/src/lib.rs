//! Convolutional inference and training with virtual pooling.
//!
//! A virtual pooling (ViP) layer runs a convolution at twice its stride and
//! restores the original output size by linear interpolation, cutting that
//! layer's convolution work by 4x while downstream layers see unchanged
//! shapes. The crate provides the layer itself ([`vip`]), the small
//! framework it lives in ([`tensor`], [`layers`], [`network`],
//! [`trainer`]), an analytical output-error bound ([`bound`]) and the
//! sensitivity-ordered insertion and finetuning procedure ([`pipeline`]).

pub mod bound;
pub mod data;
pub mod error;
pub mod layers;
pub mod model_io;
pub mod network;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod vip;
pub mod zoo;

pub use error::{Error, Result};
pub use network::{Layer, Network};
pub use tensor::Tensor;

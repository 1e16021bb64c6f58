//! Spatio-temporal video classification with convolutional LSTMs.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`graph`], [`gradcheck`]: dense arrays, reverse-mode
//!   differentiation and a finite-difference oracle.
//! * [`nn`]: convolutional LSTM, batch norm, dense and dropout layers over a
//!   named parameter store, plus checkpoints.
//! * [`flow`]: dense polynomial-expansion optical flow and its three-channel
//!   encoding.
//! * [`data`]: on-disk corpus, sequence extraction, augmentation and a
//!   synthetic motion-labelled corpus generator.
//! * [`models`]: one- and two-stream recurrent models and a single-frame
//!   baseline.
//! * [`train`], [`eval`], [`saliency`]: optimisation, leave-one-subject-out
//!   evaluation and top-filter saliency maps.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod nn;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Padding};
pub use models::{FusionMode, Model, ModelConfig, ModelKind, Modality};
pub use tensor::Tensor;

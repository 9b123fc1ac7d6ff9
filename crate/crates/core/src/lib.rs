//! RGB-T single-object tracker: a shared-weight ViT over both modalities with
//! channel and spatial cross-modal fusion, a center-based box head, and the
//! tooling around it (autodiff, checkpoints, tracking, evaluation, training).

pub mod autodiff;
pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod tracking;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

//! Active foundational model for vibration-based fault diagnosis.
//!
//! A transformer backbone is pretrained with nearest-neighbour contrastive
//! learning on unlabeled windows, a small classifier head is trained on top
//! of the frozen backbone, and an entropy + KL-divergence active-learning
//! loop decides which windows are worth sending to the labeling oracle.
//!
//! Everything is double precision and runs on the CPU. Gradients come from
//! the small tape-based reverse-mode engine in [`graph`].

pub mod active;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod heads;
pub mod optim;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Matrix;

//! Desk-scale small-object detector.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with reverse-mode autodiff.
//! - [`caa`]: contextual anchor attention (pooled context gating followed by
//!   single-head scaled dot-product attention).
//! - [`rfafpn`]: receptive-field attention convolution, bidirectional weighted
//!   pyramid fusion, the adversarial discriminator and the composite loss.
//! - [`augment`]: class-frequency driven contrast adjustment, minority sample
//!   mixing and geometric augmentation.
//! - [`detector`]: backbone stub, head, decoding, NMS, training and FLOP
//!   accounting.
//! - [`metrics`]: IoU matching, precision/recall/F1, AP and mAP, confusion
//!   matrices.
//! - [`io`]: YOLO label files, P6 pixmaps, synthetic datasets, ablations and
//!   rendering.

pub mod augment;
pub mod caa;
pub mod data;
pub mod detector;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod rfafpn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RandomSource;
pub use tensor::Tensor;

//! Convolutional network engine for slice-level MRI classification.
//!
//! The crate is `no_std` (it needs `alloc`) and does no IO: file formats,
//! image decoding and the command line live in the `mcinet` companion crate.
//!
//! Layout:
//!
//! * [`tensor`] and [`kernels`]: dense NCHW storage, GEMM, im2col.
//! * [`layers`]: forward/backward for every layer kind plus [`gradcheck`].
//! * [`graph`]: the DAG model, shape inference, census, execution, head
//!   replacement and freezing.
//! * [`zoo`]: AlexNet, VGG16, GoogLeNet and ResNet18 builders.
//! * [`data`]: manifests, subject-level splits, preprocessing, synthetic slices.
//! * [`train`]: SGD with momentum, evaluation with per-subject voting and the
//!   architecture comparison harness.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Shape2D, Tensor};

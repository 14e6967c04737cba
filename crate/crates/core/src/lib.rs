//! Recognising famous tourist destinations in images and movie frames.
//!
//! The crate is built around a small from-scratch numeric core:
//!
//! * [`tensor`], [`ops`], [`tape`] and [`gradcheck`]: dense tensors, layer
//!   kernels with hand-written backward passes, a layer-level autograd tape
//!   and a finite-difference checker.
//! * [`model`] and [`checkpoint`]: the three-layer CNN (256/256/14 by
//!   default) and its binary file format.
//! * [`labels`], [`imaging`], [`curate`] and [`corpus`]: the destination
//!   label map, image preprocessing, the download-and-dedup pipeline, and
//!   manifest scanning/splitting/loading.
//! * [`trainer`]: SGD with momentum and evaluation metrics.
//! * [`annotate`]: per-frame classification, temporal smoothing and caption
//!   output as SRT or JSON.
//! * [`synthetic`]: a procedural shapes corpus for smoke tests and
//!   experiments.

pub mod annotate;
pub mod checkpoint;
pub mod corpus;
pub mod curate;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod labels;
pub mod model;
pub mod ops;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{AnnotateError, CheckpointError, CorpusError, TensorError, TrainError};
pub use labels::LabelMap;
pub use model::{build_model, ArchitectureConfig, Classifier, ModelParams};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

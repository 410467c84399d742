//! Semi-supervised video object segmentation with a Siamese backbone and
//! an interactive transformer, at desk scale.
//!
//! The numeric core is [`tensor`]: dense tensors, a reverse-mode tape and
//! a finite-difference oracle. The model is assembled from [`backbone`],
//! [`attention`], [`transformer`] and [`decoder`]; [`pipeline`] runs it
//! over whole videos using the frame selection policies in [`memory`].
//! [`synth`] generates sprite videos, [`train`] fits the model on them and
//! [`metrics`] scores the results.

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod init;
pub mod io;
pub mod mask;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Element, ParamStore, Tape, Tensor, Var};

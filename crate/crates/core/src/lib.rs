//! Prompt-tuning classification head for mobile UI element detection.
//!
//! The crate is `no_std` (with `alloc`) and contains only the numerical and
//! combinatorial pieces of the pipeline:
//!
//! * [`geometry`]: boxes, IoU / IoM, and linking OCR phrases to UI elements.
//! * [`store`]: the keyed embedding store and its binary codec.
//! * [`data`]: screenshot annotations and category splits.
//! * [`network`] and [`head`]: the bottleneck tuning network, prompt tuning,
//!   cosine-softmax classification, cross-entropy loss and analytic gradients.
//! * [`trainer`]: deterministic mini-batch SGD.
//! * [`evaluator`]: detection-style average precision and mAP.
//! * [`synth`]: a seeded synthetic embedding fixture.
//!
//! File IO, parsing of text formats and the command line live in the
//! companion `mui-apt` crate.
#![no_std]

extern crate alloc;

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod head;
pub mod math;
pub mod network;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

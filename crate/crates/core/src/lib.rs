//! Semantic matching by refining multi-channel 4D correlation maps with
//! linear-complexity match-to-match attention.
//!
//! The pipeline runs from per-layer feature maps to a correlation tensor
//! ([`correlation`]), through the attention stack ([`attention`]) to a dense
//! flow and transferred keypoints ([`flow`]), scored by PCK
//! ([`evaluation`]). [`analysis`] measures how far attention reaches and
//! [`datasets`] supplies annotations, stored features and synthetic pairs.
//! Everything is built on the small autodiff engine in [`tensor`].

pub mod analysis;
pub mod attention;
pub mod correlation;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

//! Lifelong training of global image descriptors for loop-closure detection.
//!
//! Frames arrive one environment at a time and are seen once. A
//! similarity-aware FIFO buffer supplies triplets with ground-truth labels,
//! and forgetting of earlier environments is limited by a relational
//! importance penalty and relational distillation against the previous
//! environment's parameters.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod frame;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod memory;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};

//! Flow-matching generative models on synthetic low-dimensional data, merged
//! through density operators (intersection, union, Wasserstein interpolation)
//! by a mirror-descent outer loop whose inner step is an adjoint-matching
//! fine-tuning solve. An exact grid oracle provides closed-form merge targets
//! and a sampling-free reference iteration for validation.

pub mod cfm;
pub mod checkpoint;
pub mod critic;
pub mod driver;
pub mod error;
pub mod finetune;
pub mod flow;
pub mod grid;
pub mod mixture;
pub mod net;
pub mod operators;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};

//! Thin-and-deep speech encoder distillation.
//!
//! A self-contained stack: a reverse-mode autodiff engine ([`tensor`]),
//! the encoder building blocks ([`layers`]), teacher/student model
//! construction ([`model`]), hint-based distillation ([`distill`]),
//! benchmarking ([`bench`]) and audio/checkpoint I/O ([`io`]).

pub mod bench;
pub mod checks;
pub mod distill;
pub mod error;
pub mod io;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Gradients, Graph, Tensor, Var};

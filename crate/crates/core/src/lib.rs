//! Language-adaptive weight generation for a toy visual grounding model,
//! built on a small reverse-mode autodiff engine.

pub mod backbone;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod law;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

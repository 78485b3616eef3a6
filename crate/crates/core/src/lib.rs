//! Learning symbolic percepts through fixed task programs.
//!
//! A policy is split into a perception network that maps raw observations to
//! a distribution over task symbols and a fixed program (an LQR control law
//! or an A* planner) that turns sampled symbols into actions. Because the
//! program contributes nothing to the trace log-likelihood gradient, the
//! network trains with plain REINFORCE regardless of what the program does.
//!
//! The crate bundles everything needed to run the cart-pole and grid-world
//! studies end to end: a small `f64` reverse-mode autodiff tape, the
//! distribution heads, both environments with deterministic renderers, the
//! LQR/A* programs, the training loop, and the evaluation instruments.

pub mod dist;
pub mod env;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod params;
pub mod perceptor;
pub mod programs;
pub mod symbol;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{Adam, AdamHyper, ParameterSet};
pub use symbol::SymbolVector;
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;

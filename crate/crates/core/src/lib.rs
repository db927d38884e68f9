//! Classical emulation of history-state algorithms for linear SDEs
//! `dX = A(t) X dt + B(t) dW`, with numerical checks of their error bounds.

pub mod cli;
pub mod combinatorics;
pub mod dyson;
pub mod em;
pub mod error;
pub mod estimator;
pub mod history;
pub mod linalg;
pub mod model;
pub mod prng;

pub use error::{Error, Result};

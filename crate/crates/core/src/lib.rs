//! Neural processes trained and evaluated on noisy function observations.
//!
//! The crate covers the whole pipeline: Gaussian-process function data with structured
//! noise ([`funcdata`]), a small autodiff backbone ([`backbone`]), the six neural-process
//! variants ([`models`]), their training objectives including the noise-robust one
//! ([`objectives`]), importance-sampled evaluation and experiment sweeps ([`eval`]), and
//! images treated as 2D functions ([`imagefunc`]).

pub mod backbone;
pub mod config;
mod error;
pub mod eval;
pub mod funcdata;
pub mod imagefunc;
pub mod models;
pub mod objectives;
pub mod train;

pub use error::{Error, ErrorKind, Result};

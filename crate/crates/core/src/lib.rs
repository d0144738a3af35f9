//! Recovery of a hidden independent component from an invertible mixture
//! `x = f(s, t)` when the other component `t` is observed.
//!
//! An autoencoder reconstructs `x` from a code and `t`, while a discriminator
//! tries to predict `t` from the code; the encoder is trained to defeat it.
//! The crate also ships the synthetic generators, an exact discrete checker
//! for the identifiability argument, evaluation metrics and adaptive-filter
//! baselines used to validate the method.

pub mod autodiff;
pub mod baselines;
pub mod datagen;
pub mod eval;
pub mod error;
pub mod infometrics;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod trainer;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};

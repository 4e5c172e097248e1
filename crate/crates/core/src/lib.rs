//! Semi-supervised sequence-VAE training framework for text classification.
//!
//! The crate is layered bottom-up: a tape-based reverse-mode autodiff core
//! ([`tensor`]), neural layers ([`layers`]), stochastic building blocks
//! ([`stochastic`]), the encoder/decoder model ([`model`]), training
//! objectives for the SSVAE variants ([`objectives`]), the optimizer and
//! training loop ([`training`]), dataset handling ([`data`]), analytic
//! verification suites ([`verify`]), and the experiment harness
//! ([`harness`]).

pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod parallel;
pub mod training;
pub mod verify;
pub mod rng;
pub mod scalar;
pub mod stochastic;
pub mod tensor;

pub use error::{Error, Result};

//! Once-for-all Transformer supernets for speech-style encoders.
//!
//! A single maximal weight store realizes every architecture of a declared
//! search space through prefix slicing. The crate trains such supernets by
//! masked distillation from a frozen teacher (first the largest architecture,
//! then with a random subnet per step) and searches them for the best subnet
//! under a parameter budget.

pub mod cli;
pub mod config;
pub mod distillation;
pub mod error;
pub mod numerics;
pub mod search;
pub mod supernet;
pub mod training;

pub use error::{Error, Result};

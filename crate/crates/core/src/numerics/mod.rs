//! Dense tensors, a reverse-mode tape, seeded randomness and a gradient oracle.

pub mod gradcheck;
mod graph;
pub mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use tensor::Tensor;

pub(crate) use graph::{gelu_scalar, standardize_raw};

/// Engine scalar.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
/// Engine scalar (64-bit verification build).
#[cfg(feature = "f64")]
pub type Real = f64;

/// Epsilon used by every layer norm and target standardization.
pub const LN_EPS: Real = 1e-5;

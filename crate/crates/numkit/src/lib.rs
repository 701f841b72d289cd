//! Minimal numerical toolkit: row-major `f64` tensors, a Wengert-style tape
//! for reverse-mode differentiation, the Adam optimizer, and dense symmetric
//! linear algebra (cyclic Jacobi eigendecomposition, Cholesky).
//!
//! Everything is single-threaded and deterministic: identical inputs replay
//! to bit-identical values and gradients.

mod adam;
mod error;
pub mod gradcheck;
pub mod linalg;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use error::{NumError, Result};
pub use linalg::{sym_eig, Matrix, SymEig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

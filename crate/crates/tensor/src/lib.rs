//! Small f64 tensor engine: a flat value type, deterministic seeded RNG
//! with named substreams, reverse-mode autodiff on an explicit tape, a
//! finite-difference gradient checker, and Adam.
//!
//! Everything is single-threaded and allocation-simple on purpose — the
//! models built on top are desk-scale and determinism matters more than
//! throughput here.

mod adam;
mod check;
mod error;
pub mod kernels;
mod rng;
mod tape;
mod tensor;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use check::{grad_check, grad_check_at};
pub use error::{Result, TensorError};
pub use kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
pub use rng::SeedRng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

//! Dense kernels, the gradient tape, and the finite-difference harness.

mod gradcheck;
mod kernels;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, mixed_error, GradCheckReport};
pub use kernels::{cosine_sim, kl_weighted_sum, sigmoid, softmax_row, MIN_NORM};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

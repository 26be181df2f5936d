//! Dense matrices and deterministic random streams.

mod matrix;
mod rng;

pub use matrix::{frobenius_norm, matmul, Matrix};
pub use rng::{gaussian_fill, stream_id, RngStream};

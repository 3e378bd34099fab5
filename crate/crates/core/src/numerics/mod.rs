//! Dense `f64` arrays, a reverse-mode graph over a fixed primitive set,
//! deterministic random streams, optimizers, and a finite-difference checker.

mod array;
mod check;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod rng;

pub use array::DenseArray;
pub use check::{
    evaluate, finite_diff_check, forward_backward, forward_backward_with, forward_value, GraphProgram,
    ParamVars,
};
pub use graph::{Adjoints, Graph, Var};
pub use kernels::{l2_normalize_rows, row_softmax};
pub use optim::{sgd_step, Adam, AdamConfig};
pub use params::ParamStore;
pub use rng::{derive_seed, Rng};

/// Default floor on row norms before normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Glorot-uniform weight matrix `[fan_in, fan_out]`.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> DenseArray {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-limit, limit))
        .collect();
    DenseArray::from_parts(vec![fan_in, fan_out], data)
}

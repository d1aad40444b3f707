//! Dense f64 tensor engine with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major `f64` tensors, a define-by-run
//! [`Graph`] rebuilt on every forward pass, and an [`AdamState`] optimizer.
//! Everything runs in double precision so finite-difference gradient checks
//! stay tight.
//!
//! Reductions that contract over sequence positions (softmax denominators and
//! [`Graph::matmul_ordered`]) accumulate their terms in canonical value order,
//! which makes those results independent of input ordering and of any internal
//! parallelism.

mod adam;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use graph::{Axis, Gradients, Graph, Var};
pub use tensor::{ordered_sum, Tensor};

#[cfg(test)]
pub(crate) fn tests_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

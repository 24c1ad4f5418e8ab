//! Dense `f64` tensors, tape-based reverse-mode autodiff and SGD.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod sgd;
mod tensor;

pub use graph::{smooth_l1_value, Graph, SparseEntry, Var};
pub use params::{ParamId, ParamStore};
pub use sgd::{sgd_step, SgdState, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used for every random draw in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

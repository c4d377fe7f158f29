//! Multi-scale patchify capsule network, end to end on CPU: a small
//! reverse-mode autodiff engine, the capsule layers and cross-agreement
//! routing, the training recipe, dataset handling, and the FGSM/BIM
//! robustness harness.

pub mod attack;
pub mod capsule;
pub mod data;
pub mod error;
pub mod model;
pub mod train;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};

/// Caps the worker-thread pool from `MSPCAPS_THREADS` (default: all cores).
/// Results are bit-identical for any thread count; this only bounds CPU use.
pub fn init_threads_from_env() {
    if let Ok(text) = std::env::var("MSPCAPS_THREADS") {
        if let Ok(n) = text.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

//! Probabilistic modules over a reverse-mode autodiff tensor core.

pub mod dist;
pub mod error;
pub mod graph;
pub mod infer;
pub mod io;
pub mod nn;
pub mod posterior;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use dist::{Distribution, Fingerprint};
pub use graph::{set_posteriors, Module, PqTerm, RandomVariable};
pub use infer::{effective_sample_size, elbo, fit_map, fit_mcmc, fit_vi, FitReport, McmcOptions, McmcRun, Optimizer};
pub use io::{load_json, load_state, save_json, save_state};
pub use error::{Error, Result};
pub use posterior::{Posterior, PosteriorKind, SlotKey, Transform};
pub use rng::RngState;
pub use scalar::Scalar;

/// Default-precision tensor used by the probabilistic layer.
pub type Tensor = tensor::Tensor<f64>;
/// Single-precision instantiation of the same core.
pub type Tensor32 = tensor::Tensor<f32>;

/// Clear this thread's default-precision gradient tape.
pub fn clear_tape() {
    tensor::tape::clear::<f64>();
}

/// Run `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    tensor::tape::no_grad(f)
}

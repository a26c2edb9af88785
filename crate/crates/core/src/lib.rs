//! Bi-level meta-learning with geometry-adaptive preconditioned inner loops.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`mlp`]: dense tensors, a reverse-mode tape
//!   that can differentiate its own backward passes, and small ReLU
//!   networks.
//! - [`linalg`]: mode-n unfolding and a deterministic Jacobi SVD.
//! - [`preconditioners`]: the SVD-based preconditioner, its SVD-free
//!   approximation, Meta-SGD variants and the explicit block operator.
//! - [`theory`]: Monte-Carlo and algebraic checks of the preconditioner's
//!   properties.
//! - [`tasks`]: the sinusoid regression task family and evaluation protocol.
//! - [`metaloop`]: inner adaptation, outer updates and training.
//! - [`verify`]: named verification suites built from the checks above.
//! - [`persist`]: run directories (`config.json`, `losses.csv`,
//!   `state.bin`, `eval.csv`).

pub mod autodiff;
pub mod error;
pub mod linalg;
pub mod metaloop;
pub mod mlp;
pub mod par;
pub mod persist;
pub mod preconditioners;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod theory;
pub mod verify;

pub use error::{GapError, Result};
pub use tensor::Tensor;

//! Minimal dense-tensor engine with reverse-mode differentiation — just
//! enough machinery to train the two backbone models on a desktop CPU.
//!
//! Compute is `f32` in the training/inference builds; gradient checks
//! instantiate the same code at `f64`. Explicit reductions (normalization
//! statistics, softmax normalizers, log-sum-exp) always accumulate in `f64`.

pub mod adam;
pub mod checks;
pub mod element;
pub mod fdcheck;
pub mod graph;
pub mod kernels;
pub mod params;

pub use adam::{AdamConfig, AdamState};
pub use element::Element;
pub use graph::{all_finite, Gradients, NnError, Tape, Var};
pub use params::{ParamId, ParamStore};

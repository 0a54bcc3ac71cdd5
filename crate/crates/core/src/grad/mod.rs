//! Hand-written reverse passes and the finite-difference checker.

pub mod check;
pub mod dd;
pub mod layer;
pub mod model;

pub use check::{finite_diff_check, rel_err, FdOptions, FlatParams, GradCheckReport, Probe, TensorCheck};
pub use dd::Dd;
pub use layer::{backward_sequence, backward_step};
pub use model::{
    batch_loss_and_grads, gradcheck_model, model_backward, route_fingerprint, BatchGrads, GradCheckPreset,
};

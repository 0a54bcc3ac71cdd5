//! Factorization Memory: a recurrent sequence layer that routes each token to
//! the top-k of `m` memory rows, with a byte-level language-model harness,
//! hand-written gradients and FLOPS accounting around it.

pub mod attention;
pub mod bench;
pub mod error;
pub mod flops;
pub mod grad;
pub mod layer;
pub mod model;
pub mod par;
pub mod report;
pub mod scan;
pub mod tensor;
pub mod train;

pub use error::{FmError, Result};
pub use layer::{ForwardMode, ForwardOptions, LayerConfig, LayerParams, MemoryState};
pub use par::Execution;
pub use tensor::{Precision, Scalar, Tensor2};

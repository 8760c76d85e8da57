//! Instance-attention knowledge distillation for dense detectors: learnable
//! selector vectors score RoI-pooled instance features, the scores become a
//! multiplicative spatial mask, and a student detector is trained against the
//! masked teacher features alongside its own detection loss.

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mask;
pub mod pipeline;
pub mod roi;
pub mod selector;
pub mod tensor;
pub mod toydet;
pub mod viz;
pub mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Hash of the library sources baked in at build time; recorded in run
/// metadata so results can be traced to the code that produced them.
pub const SRC_HASH: &str = env!("INSTAKD_SRC_HASH");

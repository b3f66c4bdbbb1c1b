//! Dense tensors and the minimal reverse-mode tape used by every trainable
//! module.

mod gradcheck;
mod graph;
mod init;
mod params;
mod tensor;

pub use gradcheck::{clip_global_norm, grad_check, global_norm};
pub use graph::{Graph, Var};
pub(crate) use graph::log_sum_exp;
pub use init::{constant_init, fan_in_uniform_init, xavier_uniform_init};
pub use params::{Gradients, ParamGroupTag, ParamId, ParamStore};
pub use tensor::Tensor;

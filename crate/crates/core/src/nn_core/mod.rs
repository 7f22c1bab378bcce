//! Dense tensors, a recording tape for reverse-mode gradients, parameter
//! storage, initialization and a finite-difference checker.

mod gradcheck;
mod init;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use init::{init_param, InitScheme};
pub use params::{Gradients, ParamId, ParamKind, ParamStore};
pub use tape::{CustomOp, GradSink, NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use tensor::{matvec_acc, matvec_t_acc, outer_acc, sigmoid};

//! Dense tensors, the autodiff tape and the gradient oracle.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod macs;
pub mod tensor;

pub use gradcheck::{
    check_module, check_module_with, finite_diff_check, relative_error, ParamCheck, Probe, DEFAULT_STEP,
};
pub use graph::{CustomOp, ElementwiseOp, Graph, Var};
pub use tensor::{broadcast_shape, broadcast_to, Tensor};

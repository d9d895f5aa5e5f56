//! Tape-based reverse-mode differentiation over dense arrays.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_primitive, finite_diff_grad, PrimitiveCheck};
pub use kernels::ConvGeometry;
pub use tape::{
    BatchStats, Conv2dAttrs, LossValue, NormStats, OpAttrs, OpKind, Tape, Var,
};
pub use tensor::{dot, l2, relative_error, NodeId, Tensor};

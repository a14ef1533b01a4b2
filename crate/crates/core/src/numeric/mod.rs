//! Dense tensors, reverse-mode differentiation, gradient checking and Adam.

mod adam;
mod gradcheck;
mod linear;
mod param;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{
    grad_check, grad_check_inputs, op_suite, relative_error, Coords, GradCheckReport, REL_ERR_FLOOR,
};
pub use linear::{LayerNormParams, LinearLayer};
pub use param::{init_uniform, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

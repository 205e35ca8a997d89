//! Minimal reverse-mode differentiation engine.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport, Probe, FD_STEP, REL_ERR_FLOOR};
pub use graph::{sinhc, AttentionSpec, Gradients, Graph, Unary, Var, ACOSH_GRAD_FLOOR, ACOS_GRAD_CAP, LAYER_NORM_EPS};
pub use params::{Param, ParamKind, ParamSet, Session};
pub use tensor::{matmul, Tensor};

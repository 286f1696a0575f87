//! Dense tensors, reverse-mode differentiation and finite-difference checks.

mod graph;
mod gradcheck;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Mode, Var};
pub use gradcheck::{finite_diff_check, finite_diff_check_floored, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{Parameter, ParamStore};
pub use tensor::{Scalar, Tensor};

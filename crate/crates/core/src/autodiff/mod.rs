//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Broadcasting is limited to scalars and leading axes (one operand's shape
//! is a trailing suffix of the other's); anything else is a shape error.
//! Explicit [`Graph::broadcast`] repeats a size-1 axis.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

pub use gradcheck::{
    check_primitive, grad_check, numeric_grads, primitive_case, rel_err, GradCheckEntry, GradCheckReport, FD_STEP,
    PRIMITIVES, REL_ERR_FLOOR,
};
pub use graph::{Bindings, GradMap, Graph, Var};
pub use params::{Checkpoint, ParamEntry, ParamStore, CHECKPOINT_VERSION};

//! Minimal dense linear algebra, parameter containers, an SGD-with-momentum
//! optimizer, and a finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod optim;

pub use gradcheck::finite_diff_check;
pub use matrix::{dot, l2_normalize, norm, Matrix, DEGENERATE_NORM};
pub use optim::{sgd_step, ParamTensor, SgdConfig};

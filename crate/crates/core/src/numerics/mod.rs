//! Dense matrices, a reverse-mode tape, a finite-difference oracle and a
//! masked SGD optimizer.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_where, max_relative_error, numeric_gradient, numeric_gradient_where,
    REL_ERR_FLOOR,
};
pub use optim::{ParamMask, Sgd};
pub use params::{group_of, uniform, ParamStore};
pub use tape::{sigmoid, Grads, Tape, Var};
pub use tensor::Tensor;

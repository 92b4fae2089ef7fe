//! Dense matrices, a reverse-mode tape, and the SGD parameter store that
//! the rest of the pipeline is written against.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ParamCheck};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{OpRecord, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{dot, softmax_in_place};

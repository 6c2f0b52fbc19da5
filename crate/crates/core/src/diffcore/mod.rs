//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod param;
mod real;
mod tape;
mod tensor;

pub use adam::Adam;
pub use param::{GradSink, ParamId, ParamNode, ParamStore, ParamView};
pub use real::{cst, Precision, Real};
pub use tape::{CustomOp, LeafGrads, Tape, Var};
pub use tensor::Tensor;

// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod camera;
pub mod depth;
pub mod error;
pub mod head;
pub mod init;
pub mod lift_splat;
pub mod ops;
pub mod pipeline;
pub mod reparam;
pub mod scene;
pub mod store;
pub mod tensor;
pub mod temporal;

pub use error::{Error, Result};
pub use tensor::Tensor;

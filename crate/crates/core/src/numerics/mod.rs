//! Dense tensors, reverse-mode differentiation and the optimizer.

mod adam;
mod conv;
mod dense;
pub mod gradcheck;
mod lstm;
mod norm;
mod params;
mod pool;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use conv::{conv2d, conv2d_backward, conv2d_output_shape};
pub use dense::{cross_entropy, dropout, dropout_mask, linear, softmax, softmax_cross_entropy};
pub use gradcheck::{finite_diff_check, GradcheckConfig, GradcheckReport, SlotReport};
pub use lstm::{bilstm, concat_last, lstm, LstmWeights};
pub use norm::{batchnorm, BatchStats, RunningStats, BN_EPS, BN_MOMENTUM};
pub use params::{ParamStore, Slot};
pub use pool::{maxpool2d, maxpool2d_backward};
pub use scalar::{DType, Scalar};
pub use tape::{Backward, Tape, Var};
pub use tensor::Tensor;

/// Forward-pass behaviour of dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

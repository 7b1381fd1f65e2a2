//! Minimal feed-forward network engine: matrices, ReLU MLPs with softmax
//! cross-entropy, exact backprop, optimizers, and gradient checking.

mod checkpoint;
mod gradcheck;
mod matrix;
mod mlp;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta, LayerRecord};
pub use gradcheck::{finite_difference_check, grad_check, rel_error, CoordError, GradCheckReport, REL_ERROR_FLOOR};
pub use matrix::{argmax, Matrix};
pub(crate) use matrix::{col_sums, matmul, matmul_nt, matmul_tn};
pub use mlp::{
    log_softmax_into, loss, loss_and_grad, mlp_forward, softmax_cross_entropy, softmax_rows, Dense, MlpParams,
    ParamKind, ParamTensors,
};
pub(crate) use mlp::check_labels;
pub use optim::{cosine_lr, optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};

//! Tensor arithmetic, reverse-mode differentiation, losses and Adam.

mod adam;
pub mod grad_check;
mod layers;
mod ops;
mod rng;
mod tensor;

pub use adam::{adam_step, Adam, AdamState};
pub use grad_check::{grad_check, grad_check_params, grad_check_report, GradCheckReport};
pub use layers::{embedding_table, tied_embedding_table, zero_all, LayerNorm, Linear, NamedParams, Parameters, LAYER_NORM_EPS};
pub(crate) use layers::join;
pub use ops::{gelu_scalar, log_softmax_row, GATHER_ZERO};
pub use rng::Rng;
pub use tensor::{grad_enabled, no_grad, Tensor};

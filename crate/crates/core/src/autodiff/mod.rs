//! Minimal reverse-mode automatic differentiation: tensors, a define-by-run
//! tape, the operator set the encoder needs, dual-bank batch normalisation,
//! Adam and a cosine learning-rate schedule.

mod batchnorm;
mod gemm;
pub mod gradcheck;
mod graph;
mod layers;
mod nn;
mod ops;
mod optim;
mod param;
mod simam;
mod tensor;

pub use batchnorm::{Bank, BnContext, BnMode, DualBatchNorm, RunningStats, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use gradcheck::{check_gradients, grad_check, GradCheckReport, OpKind};
pub use graph::{Gradients, Graph, MarginKind, Var};
pub use layers::{Conv2d, GruCell, Linear};
pub use nn::BatchStats;
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState, DEFAULT_LR};
pub use param::{Binder, Param, ParamId, ParamStore};
pub use tensor::Tensor;

pub use simam::inverse_energy as simam_inverse_energy;

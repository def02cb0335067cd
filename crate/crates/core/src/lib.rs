//! Core numerics for differentially private fine-tuning: tensors, a tape
//! autodiff engine with per-example gradients, a small transformer,
//! parameter-efficient modules, DP optimizers and an RGP baseline.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod ops;
pub mod optim;
pub mod param;
pub mod peft;
pub mod rgp;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, PerExampleGradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelConfig, Network, TokenBatch};
pub use param::{ParamAccess, ParamStore, Parameter};
pub use tensor::{DType, Tensor};

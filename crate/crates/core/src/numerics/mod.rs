//! Differentiable computation core: tensors, the recording tape, transformer
//! layers, AdamW and the warm-up/cosine schedule.

pub mod gradcheck;
pub(crate) mod kernels;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use optim::{adamw_step, AdamW, AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use rng::SeedStream;
pub use schedule::LrSchedule;
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;

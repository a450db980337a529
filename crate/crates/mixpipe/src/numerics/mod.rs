//! Differentiable tensor core: tape autodiff, AdamW, LR schedules, and
//! finite-difference gradient verification.

mod gradcheck;
mod graph;
mod optim;
mod schedule;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Graph, Tensor, TensorId};
pub use optim::{adamw_step, AdamwHyper, OptimState};
pub use schedule::{lr_at_step, ScheduleConfig, ScheduleShape};

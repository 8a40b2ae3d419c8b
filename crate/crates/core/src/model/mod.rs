//! A small, deterministic, differentiable implementation of the occlusion
//! head stack: shared RoI features feed amodal and visible mask heads, and
//! the occlusion logits are the amodal logits minus the ReLU'd visible
//! logits. Includes the five-term loss, its ablation variants, gradient
//! verification, and a toy training loop on synthetic shape data.

pub mod gradcheck;
pub mod heads;
pub mod loss;
pub mod optim;
pub mod tensor;
pub mod train;

pub use heads::{forward_heads, shared_init, ModelParams, ParamGroup, Variant};
pub use loss::{total_loss, LossBreakdown, RoiSample};
pub use optim::{sgd_step, LrSchedule};
pub use tensor::{ModelError, Tape, Tensor};

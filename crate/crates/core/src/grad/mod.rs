//! Dense tensors with tape-based reverse-mode differentiation, plus the
//! layers the denoiser needs.

pub mod check;
pub mod checkpoint;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use check::{check_param_gradients, relative_error, GradCheck};
pub use nn::{attention, layer_norm, patch_indices, unpatch_indices, Init, LayerNorm, Linear, PatchEmbed};
pub use optim::{AdamW, LrSchedule};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

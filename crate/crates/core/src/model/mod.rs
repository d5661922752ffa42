//! Toy modular vision-language model `M = (V, P, L)`.
//!
//! [`ToyVLM`] owns three parameter groups. Forward passes are recorded on an
//! [`autodiff::Tape`](crate::autodiff::Tape) so any group can be made trainable;
//! the value-level helpers ([`ToyVLM::forward`], [`switch_forward`]) wrap a
//! throwaway tape for inspection and tests.

mod checkpoint;
mod config;
mod image;
mod modules;
mod param;
mod vlm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ParamEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{check_switch_compatible, ImageSize, ModelConfig};
pub use image::{patchify, Image};
pub use modules::{
    Block, BlockVars, LanguageModel, LanguageVars, LmShell, LmShellVars, Projector, ProjectorVars, VisionEncoder,
    VisionVars,
};
pub use param::Param;
pub use vlm::{switch_forward, switch_forward_on_tape, BatchInputs, BoundVlm, Group, ToyVLM, Trainable, VisualFeatures};

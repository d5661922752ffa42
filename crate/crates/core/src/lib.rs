//! Desk-scale visual-switch knowledge distillation for modular vision-language models.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode tape over dense arrays, plus a finite-difference oracle.
//! - [`knee`]: knee-point detection on a sorted logits curve.
//! - [`loss`]: the dynamic bi-directional logits-difference loss and its ablation baselines.
//! - [`model`]: a toy (visual encoder, projector, language model) triple and checkpoints.
//! - [`data`]: seeded synthetic image/question/answer tasks.
//! - [`engine`]: training stages, the composite objective, schemes and evaluation.
//! - [`verify`]: the self-check suite behind `switchkd verify`.

pub mod autodiff;
pub mod data;
pub mod engine;
mod error;
pub mod knee;
pub mod loss;
pub mod model;
pub mod verify;

pub use error::{Error, Result};

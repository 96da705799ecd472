//! Timing-controlled and long-form audio generation over a small latent
//! diffusion transformer.
//!
//! The crate is organised around the inference-time control stack:
//!
//! - [`numerics`]: dense kernels (matmul, softmax, layer norm, attention)
//!   plus the seeded RNG everything else derives randomness from.
//! - [`plan`]: timing-prompt parsing and the non-overlapping window planner.
//! - [`codec`]: a fixed orthonormal waveform/latent transform with WAV I/O.
//! - [`dit`]: the denoiser, a diffusion transformer with attention hooks.
//! - [`diffusion`]: noise schedule, trainer (AdamW + EMA + inverse-decay LR)
//!   and the deterministic DDIM sampler with a per-step batch callback.
//! - [`control`]: decoupling/aggregating attention control over a 1 + k batch.
//! - [`longform`]: overlapped segment planning, per-step latent composition,
//!   reference guidance and trim-and-concatenate.
//! - [`eval`]: synthetic event datasets, a band-energy detector and metrics.
//! - [`llm`]: optional chat-completion client for planning and recaptioning.

pub mod codec;
pub mod control;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod eval;
pub mod llm;
pub mod longform;
pub mod numerics;
pub mod pipeline;
pub mod plan;
pub mod wav;

pub use error::{Error, Result};
pub use numerics::{SeededRng, Tensor2D};

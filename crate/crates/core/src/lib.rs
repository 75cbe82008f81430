//! Desk-scale engine for two-stage multimodal denoising and complementation
//! over pre-extracted feature sequences (audio / text / video).
//!
//! Stage 1 (IMD) denoises each modality through per-modality and shared
//! variational bottleneck pipelines on complete data; stage 2 (IMC) fuses the
//! surviving modalities and synthesizes stand-ins for missing ones via
//! cross-attention. Everything runs on a from-scratch reverse-mode autodiff
//! tape in 64-bit floats; files store 32-bit.

pub mod data;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

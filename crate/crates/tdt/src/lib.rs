//! Desk-scale task-guided disentangled tuning (TDT).
//!
//! A self-contained stack for studying confidence-guided regularized
//! fine-tuning: an f64 reverse-mode autodiff engine, a tiny transformer
//! encoder with a token-level confidence head, the TDT loss family
//! (classification, deletion-game confidence loss, triplet KL ranking),
//! a synthetic spurious-correlation benchmark, a deterministic trainer,
//! and the robustness/generalization analysis protocols.

pub mod analysis;
pub mod data;
pub mod encoder;
pub mod gradcheck;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod trainer;

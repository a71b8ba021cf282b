//! Desk-scale music source separation with side-feature transfer.
//!
//! A four-source spectrogram-masking separator with cross-branch bridging,
//! three ways of injecting 128-dimensional side features (latent
//! concatenation, contrastive margin regularization, distance-based soft-margin
//! regularization), and the evaluation tooling around it: BSS-Eval style
//! SDR/SIR/SAR and latent-space clustering diagnostics.

pub mod dsp;
pub mod nncore;
pub mod sidefeat;
pub mod losses;
pub mod separator;
pub mod trainer;
pub mod datagen;
pub mod bsseval;
pub mod latentlab;

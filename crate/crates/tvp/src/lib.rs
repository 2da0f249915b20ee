//! Desk-scale text-conditioned video prediction with latent diffusion.
//!
//! Predicts future video frames from a few reference frames plus a natural
//! language instruction, using an inflated 3D denoising U-Net with
//! autoregressive spatial-temporal attention and a per-frame instruction
//! decomposer, all trained end to end on a synthetic moving-shapes corpus.
//!
//! The crate is a library first; each major capability has a runnable
//! example under `examples/`:
//!
//! - `generate_dataset` - build an instructed-video dataset with ground truth
//! - `gradcheck` - finite-difference verification of the autodiff engine
//! - `inflation_equivalence` - 2D-to-3D weight inflation sanity experiment
//! - `causality_probe` - future-frame perturbation across attention variants
//! - `identity_init` - train the instruction decomposer to the identity
//! - `train_pipeline` - miniature end-to-end pretrain/inflate/finetune run
//! - `sample_clip` - sample a video from a checkpoint and write frames
//! - `attention_timing` - wall-time comparison of the attention variants
//!
//! A thin `tvp` binary exposes the same stages as subcommands for scripting
//! (`gen-data`, `pretrain`, `inflate`, `init-text`, `finetune`, `sample`,
//! `eval`, `ablate`).

mod layers;

pub mod codec;
pub mod diffusion;
pub mod error;
pub mod fstext;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod textstack;
pub mod unet3d;

pub use error::{Error, Result};

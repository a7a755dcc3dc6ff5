//! Feature-guided latent diffusion for reconstructing visual stimuli from
//! simulated brain recordings.
//!
//! The crate is organised bottom-up: a reverse-mode [`autodiff`] tape and
//! [`nn`] layers underpin the trained models; [`codec`] and [`features`]
//! are frozen transforms; [`brain`] simulates subjects and datasets;
//! [`diffusion`] and [`denoiser`] implement guided sampling; [`decoders`]
//! maps voxels to conditions, latents and guidance targets; [`eval`]
//! scores reconstructions and [`experiment`] ties everything to a config
//! file and an output directory.

pub mod autodiff;
pub mod brain;
pub mod checkpoint;
pub mod codec;
pub mod decoders;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod nn;
pub mod tensors;

pub use error::{Error, Result};

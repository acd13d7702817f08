//! Core engine for grid-prompted visual in-context learning with a diffusion
//! inpainting model.
//!
//! Given an example image pair (A, A') and a query image B, the engine
//! arranges the three images in a 2x2 grid, treats the missing bottom-right
//! cell B' as an inpainting target, and denoises it with a compact latent
//! diffusion model whose attention layers are modified in flight:
//!
//! * **self-attention cloning** copies the pre-softmax score block relating
//!   A to B onto the block relating A' to B', transferring structural
//!   correspondences into the generated cell;
//! * **cross-attention masking** zeroes post-softmax text-attention rows for
//!   every position outside B', confining prompt guidance to the generated
//!   cell.
//!
//! The crate is `no_std` (alloc required) and fully deterministic: all float
//! transcendentals go through libm and all randomness is counter-seeded.
//! I/O, file formats, the HTTP prompt client, and the CLI live in the
//! companion `analogist` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod codec;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod grid;
pub mod nn;
pub mod prompting;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};

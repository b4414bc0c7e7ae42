//! Masked-diffusion decoding with position-preserving context compression.
//!
//! The crate is organised bottom-up:
//!
//! - [`layout`]: which coordinates of the planned context enter each forward pass.
//! - [`rope`]: rotary embeddings at arbitrary coordinates.
//! - [`model`]: a small bidirectional transformer over explicit layouts.
//! - [`decode`]: baseline, compressed, folded and anchored denoising schedulers.
//! - [`train`]: a masked-diffusion trainer on synthetic sequences.
//! - [`diagnostics`]: cost accounting, EOS traces and attention/hidden dumps.
//! - [`oracle`] and [`verify`]: independent reference computations and the
//!   structural check suite built on them.

pub mod decode;
pub mod diagnostics;
pub mod layout;
pub mod model;
pub mod oracle;
pub mod rope;
pub mod train;
pub mod verify;

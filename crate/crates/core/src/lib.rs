//! Knowledge-enhanced dual-stream projection engine for zero-shot composed
//! image retrieval, operating on precomputed embeddings.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithmic piece:
//! a small reverse-mode autodiff tensor library, exact and inverted-file
//! inner-product indices, a frozen token composer standing in for a text
//! encoder, the knowledge-guided projection network, pseudo-triplet mining,
//! dual-stream training and hybrid-retrieval evaluation. File formats, the
//! config document and the command-line front end live in the `keds` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bkp;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod mining;
pub mod nn;
pub mod numeric;
pub mod rng;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
pub use numeric::{Graph, Real, Tensor, Var};

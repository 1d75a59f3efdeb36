//! Spatio-temporal sparse attention for flattened video-latent sequences.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the algorithmic
//! pieces: the dense attention oracle, the three sparse pattern families
//! (frame bands, periodic within-frame bands and the checkerboard key
//! subset), online head classification from sampled attention recall, the
//! block-sparse and reduced-KV executors with FLOP accounting, and the
//! planted-head generators used as ground truth. File formats, timing,
//! threading and the command line live in the `stsparse` crate.
//!
//! A sequence of `t` frames of `h × w` latent tokens is flattened frame by
//! frame, so position `p` belongs to frame `p / (h·w)` at in-frame offset
//! `p % (h·w)`.

#![no_std]
#![deny(missing_debug_implementations, rust_2018_idioms)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod arm;
mod error;
pub mod executor;
pub mod math;
pub mod patterns;
pub mod workload;

pub use error::{Error, Result};
pub use math::{AdditiveMask, AttentionHead, Matrix};
pub use patterns::{BlockMask, CheckerboardSet, LatentShape, PatternKind, PatternMask};

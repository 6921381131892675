//! Signal processing, reverse-mode autodiff, network definitions and training
//! objectives for two-stage, dual-conditioned GAN speech reconstruction from
//! band-limited, noisy vibration captures.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the CLI and
//! the training loops that touch the filesystem live in the companion `radgan`
//! crate.

#![no_std]
// Float math comes from `num_traits::Float` (libm). Whenever std is in the
// crate graph (tests, or a dependent enabling `num-traits/std`) its inherent
// methods shadow the trait and leave those imports unused.
#![allow(unused_imports)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod audio;
pub mod autodiff;
pub mod data;
pub mod discriminators;
mod error;
pub mod evaluation;
pub mod fusion_gate;
pub mod generator;
pub mod instrumentation;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod wvn;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Sample rate of every waveform in the pipeline.
pub const SAMPLE_RATE: u32 = 8000;
/// Mel bins consumed by the generator and produced by the loss transform.
pub const N_MELS: usize = 80;

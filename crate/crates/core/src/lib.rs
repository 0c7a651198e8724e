//! Quantization-aware differentiable architecture search for compact
//! super-resolution networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: NCHW tensors and a reverse-mode autodiff tape.
//! * [`quant`]: LSQ weight and half-wave activation fake quantizers, plus
//!   quantization-noise sampling.
//! * [`bitmixer`]: blending of per-bit-width variants of one candidate
//!   operation (independent weights, shared weights, search against noise).
//! * [`supernet`]: the head/body/upsample/tail search space, ADQ blocks,
//!   genotypes and their instantiation.
//! * [`objective`]: L1, BitOps cost model and penalty, entropy penalty and
//!   its schedule.
//! * [`search`]: alternating search, retraining, PSNR, Pareto sweeps and the
//!   strategy timing benchmark.
//! * [`data`], [`config`], [`io`]: datasets, run configuration and file formats.

pub mod bitmixer;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod quant;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};

//! Constrained Bayesian optimization for noisy experiments.
//!
//! This crate implements expected improvement with noisy observations and
//! noisy constraints (NEI), estimated by quasi-Monte Carlo integration over
//! the Gaussian process posterior of the true values at the observed and
//! pending points. It ships:
//!
//! * [`gp`]: Matérn 5/2 GP regression with heteroscedastic fixed noise,
//!   MAP hyperparameter fitting and noiseless conditioning,
//! * [`qmc`]: scrambled Sobol sequences and the unit-cube-to-multivariate
//!   normal transform,
//! * [`acq`]: analytic constrained EI, NEI via cached fantasy models, their
//!   gradients, and multi-start candidate generation,
//! * [`study`]: an ask-tell optimization loop with durable persistence,
//! * [`problems`]: four noisy synthetic benchmark problems,
//! * [`bench`]: harnesses comparing QMC vs MC integration and NEI vs a
//!   plug-in EI baseline, emitting CSV.
//!
//! The `nei` binary exposes the ask-tell loop and the benchmark harnesses on
//! the command line.

pub mod acq;
pub mod bench;
pub mod gp;
pub mod normal;
pub mod problems;
pub mod qmc;
pub mod space;
pub mod study;

mod linalg;
mod opt;

pub use space::{DimSpec, SearchSpace};

/// Mixes a base seed with a salt to derive independent substreams.
///
/// SplitMix64 finalizer; cheap, and good enough to decorrelate streams that
/// share a user-provided seed.
pub(crate) fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

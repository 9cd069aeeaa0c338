//! Quasi-stationary laboratory for finite absorbed Markov chains.
//!
//! Exact linear-algebra computation of the quasi-stationary distribution,
//! the Q-process obtained by conditioning on non-absorption, the asymptotic
//! variance of additive functionals, and Feynman-Kac oracles for conditional
//! moments and characteristic functions, together with reproducible Monte
//! Carlo checks of the conditional central limit theorem.

pub mod chain;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod montecarlo;
pub mod qprocess;
pub mod spectral;
pub mod variance;

pub use chain::{AbsorbedChain, InitialLaw, ModelBundle, WeightFunction};
pub use error::{Error, Result};
pub use spectral::{ErgodicityCertificate, SpectralTriple};

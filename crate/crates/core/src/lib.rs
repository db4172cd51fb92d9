//! Link-level simulation of OFDM transceivers with learned modulators and
//! neural receivers, alongside classical pilot-based baselines.

pub mod channel;
pub mod classical_rx;
pub mod error;
pub mod fec;
pub mod harness;
pub mod link;
pub mod neural_mod;
pub mod neural_rx;
pub mod ofdm_grid;
pub mod rng;
pub mod trainer;
pub mod waveform;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

//! Pseudo-spectral laboratory for `(∂_t - |D|^α∂_x)φ = ½∂_x(φ²)` on a large torus.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectral_core`]: grids, fields, Fourier multipliers and Littlewood-Paley cutoffs.
//! * [`evolution`]: integrating-factor RK4 solvers and conserved quantities.
//! * [`gauge`]: the right-quantized exponential conjugation `e^{iA}`.
//! * [`normal_forms`]: resonance function, bilinear symbols and normal-form corrections.
//! * [`wavepacket`]: Hamilton flow, eikonal phases and the FBI transform.
//! * [`estimates_lab`]: mixed norms, envelopes and the estimate-reproduction experiments.
//! * [`cli_runner`]: configuration parsing, experiment dispatch and result output.

pub mod cli_runner;
pub mod estimates_lab;
pub mod evolution;
pub mod gauge;
pub mod normal_forms;
pub mod spectral_core;
pub mod wavepacket;

pub use spectral_core::{Field, Grid, C64};

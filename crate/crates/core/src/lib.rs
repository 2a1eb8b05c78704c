//! Hamiltonian Monte Carlo in coordinates warped by a learned transport map.
//!
//! The pipeline has three stages: fit a transport map `θ = f(z)` to the target
//! by maximizing the ELBO ([`vi`]), run HMC on the pulled-back density
//! `p(f(z))·|∂f/∂z|` ([`hmc::WarpedTarget`]), and push the z-space samples
//! forward through `f`. [`diagnostics`] and [`tuner`] measure and tune the
//! resulting chains.

pub mod autodiff;
pub mod benchmark;
pub mod diagnostics;
pub mod flows;
pub mod hmc;
pub mod targets;
pub mod tuner;
pub mod vi;

//! Finite-dimensional simulation, macroscopic ODEs, a Fokker–Planck solver
//! and fixed-point analysis for straight-through-estimator training of a
//! quantized linear model on Gaussian data.

pub mod error;
pub mod fixed_point;
pub mod model;
pub mod ode;
pub mod pde;
pub mod quadrature;
pub mod quantizer;
pub mod simulator;
pub mod special;

pub use error::{Error, Result};

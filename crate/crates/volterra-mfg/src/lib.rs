//! Numerical engine for linear-quadratic mean-field games whose per-player
//! dynamics are stochastic Volterra integral equations.
//!
//! The pipeline: sample the model kernels on a uniform grid, build resolvent
//! transforms, solve the Fredholm-type consistency equation for the
//! equilibrium mean trajectory, construct the decentralized feedback
//! controls, and verify the near-Nash property on finite populations by a
//! mix of exact affine-in-noise computation and Monte Carlo.

pub mod cli;
pub mod closed_loop;
pub mod config;
pub mod delay;
pub mod error;
pub mod fredholm;
pub mod grid;
pub mod nce;
pub mod population;
pub mod rng;
pub mod transforms;

pub use error::{Error, Result};
pub use grid::{GridFunction, KernelMatrix, KernelShape, TimeGrid};
pub use transforms::{GridSettings, ModelSpec, TransformBundle};

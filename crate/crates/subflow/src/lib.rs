//! Solver library for end-point-penalized control energy minimization.
//!
//! The library integrates control systems `dx/ds = F(x) u` that are linear in
//! the control, evaluates the penalized energy
//! `F_beta(u) = 1/2 ||u||^2 + beta * a(x_u(1))`, and drives the gradient flow
//! `dU/dt = -(U + beta * h_U)` on the space of piecewise-constant controls.
//! Increasing ladders of `beta` (module [`gamma`]) approximate constrained
//! energy minimizers, e.g. sub-Riemannian geodesics on the Heisenberg group.
//!
//! Modules mirror the pipeline: [`system`] defines the controlled fields and
//! end-point costs, [`trajectory`] integrates state/fundamental/adjoint
//! equations, [`gradient`] assembles the cost gradient by continuous and
//! discrete adjoints, [`second_order`] provides matrix-free Hessian probes,
//! [`flow`] runs the monotone gradient flow, [`gamma`] the beta-continuation,
//! and [`oracle`] independent verification references.

pub mod cli;
pub mod error;
pub mod flow;
pub mod gamma;
pub mod gradient;
pub mod oracle;
pub mod output;
pub mod second_order;
pub mod system;
pub mod trajectory;

pub use error::{Error, Result};

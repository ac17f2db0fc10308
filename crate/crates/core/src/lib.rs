//! Continuous-time optimal control toolkit.
//!
//! The crate transcribes trajectory-optimization problems into nonlinear
//! programs (direct shooting and collocation), solves them with first-order
//! min-max methods (gradient descent-ascent and extragradient on the
//! Lagrangian), learns unknown dynamics as neural ODEs, and trains planner
//! and model end-to-end by differentiating through an unrolled solver.
//! All gradients flow through the scalar reverse-mode tape in [`ad`].
//!
//! The crate is `no_std` (with `alloc`); IO, file formats, and the batch
//! experiment runner live in the companion CLI crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod ad;
pub mod e2e;
pub mod indirect;
pub mod integrate;
pub mod linalg;
pub(crate) mod math;
pub mod solve;
pub mod sysid;
pub mod systems;
pub mod transcribe;

pub use ad::{Tape, Var};


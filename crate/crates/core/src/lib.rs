//! Decentralized spring-damper swarm control with runtime consistency monitoring.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithmic piece of the
//! simulator:
//!
//! - [`dynamics`]: double-integrator plant, sensing, steady-state Kalman estimation.
//! - [`formation`]: Gabriel-rule neighbor selection and the primary/hidden spring laws.
//! - [`consistency`]: CUSIGN sign-randomness monitoring of inter-vehicle residuals.
//! - [`signature`]: hidden-signature detection from velocity decay and object localization.
//! - [`adversary`]: man-in-the-middle broadcast tampering.
//! - [`sim`]: the synchronous per-step orchestration of all of the above.
//!
//! File formats, trace persistence and the command line live in the `springmesh` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adversary;
pub mod consistency;
pub mod dynamics;
pub mod error;
pub mod formation;
pub mod signature;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};

/// Planar vector used for positions, velocities and control inputs.
pub type Vec2 = nalgebra::Vector2<f64>;

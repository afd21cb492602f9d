//! Learning with group noise: a group of source objects is collectively
//! related to a target, but individual object-target relations may be wrong.
//! This crate scores each object by combining a pair-matching probability
//! with a group weight derived from its similarity to the rest of the group,
//! then trains on the most confident object only.
//!
//! The pieces: dense math kernels ([`math`]), shallow embedding/linear
//! models with hand-derived gradients ([`model`]), the matching losses and
//! their ablations ([`loss`]), an Adam trainer ([`optim`]), adapters for
//! multiple-instance learning, partial-label learning, and next-item
//! recommendation ([`tasks`]), seeded synthetic data with controllable
//! group noise ([`synth`]), and ranking/classification metrics ([`eval`]).

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod math;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tasks;

pub use error::{Error, Result};

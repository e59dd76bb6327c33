//! Desk-scale laboratory for joint satellite-user association, beamforming
//! power, and spectrum allocation in LEO constellations.
//!
//! The crate is organized around a small simulation core and a learning
//! stack on top of it:
//!
//! - [`geometry`]: constellation kinematics on a 2D projected service area;
//! - [`channel`]: link budget, SINR, rates, and spectrum efficiency;
//! - [`matching`]: cluster-to-satellite association via deferred acceptance
//!   plus swap-stability refinement;
//! - [`nn`]: minimal MLP toolkit with exact gradients and parameter
//!   averaging;
//! - [`env`]: the slot-by-slot multi-agent decision environment;
//! - [`woa`]: whale-optimization expert and demonstration generation;
//! - [`gail`]: adversarial imitation learner driven by expert data;
//! - [`federated`]: client/server rounds aggregating learner parameters;
//! - [`baselines`]: clipped-surrogate RL and equal-split policies;
//! - [`harness`]: experiment runner behind the `ntnlab` CLI.

pub mod baselines;
pub mod channel;
pub mod config;
pub mod env;
pub mod error;
pub mod federated;
pub mod gail;
pub mod geometry;
pub mod harness;
pub mod matching;
pub mod nn;
pub mod seeds;
pub mod woa;

pub use error::{Error, Result};

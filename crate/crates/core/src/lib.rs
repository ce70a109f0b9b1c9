//! Offline hierarchical reinforcement learning on linear MDPs: skill
//! extraction, pessimistic high-level planning, and the error accounting that
//! ties the two together.

pub mod analysis;
pub mod data;
pub mod error;
pub mod flow;
pub mod iql;
pub mod mdp;
pub mod nn;
pub mod pevi;
pub mod vae;

pub use error::{HorlError, Result};

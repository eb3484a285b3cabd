//! Laboratory for multi-turn meta/reasoning agent training with group
//! relative policy optimisation on synthetic modular arithmetic.
//!
//! A featurized softmax policy plays both roles. The trainer samples rollout
//! groups, measures the one-step causal influence of each step by masking it
//! from the context, rewards verified restarts, and optimises either the
//! turn-normalised objective ([`objective::Variant::Rema`]) or the
//! unnormalised one with mixed advantages ([`objective::Variant::DrMamr`]).

pub mod analysis;
pub mod config;
pub mod env;
pub mod episode;
pub mod exec;
pub mod error;
pub mod hashing;
pub mod influence;
pub mod objective;
pub mod params;
pub mod policy;
pub mod run;
pub mod theorem;
pub mod trainer;
pub mod trajlog;
pub mod vocab;

pub use error::{Error, Result};

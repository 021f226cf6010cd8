//! Invariant causal prediction for block MDP families.
//!
//! The crate simulates families of linear block MDPs that share latent
//! dynamics ([`blockmdp`]), recovers the causal state abstraction with
//! iterative linear ICP ([`icp`]) or gradient-based training
//! ([`nonlinear`]), and certifies abstraction and value/model-error bounds
//! exactly on small tabular instances ([`abstraction`]). [`experiments`]
//! drives all of it from JSON configs.

pub mod abstraction;
pub mod blockmdp;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod icp;
pub mod nonlinear;
pub mod seed;

pub use error::{Error, Result};

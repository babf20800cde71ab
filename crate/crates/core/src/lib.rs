//! Influence-guided data selection over clustered candidate pools.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every algorithm:
//! k-means clustering, a small decoder-only transformer with per-layer
//! gradient taps, Kronecker-factored curvature with a joint query/key/value
//! block, influence scoring with random-projection sketches, brute-force
//! dense oracles, the UCB cluster bandit, and an Adam trainer. File formats,
//! configuration and the command line live in the `dataselect` crate.

#![no_std]

extern crate alloc;

pub mod bandit;
pub mod clustering;
pub mod corpus;
pub mod curvature;
mod error;
pub mod influence;
pub mod linalg;
pub mod math;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};

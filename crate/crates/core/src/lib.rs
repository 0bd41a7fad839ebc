//! Testbed for failure-injection data generation, recovery-aware imitation
//! and value-conditioned policy training in a planar bimanual world.

pub mod config;
pub mod error;
pub mod fault;
pub mod harness;
pub mod labeler;
pub mod math;
pub mod nn;
pub mod planner;
pub mod policy;
pub mod sim;
pub mod store;
pub mod value;

pub use error::{Error, Result};

//! Multi-sensor remote state estimation with stochastic event-based triggers.

pub mod analysis;
pub mod cli;
pub mod design;
pub mod error;
pub mod filter;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod sdp;
pub mod sim;
pub mod trigger;

pub use error::{Error, Result};

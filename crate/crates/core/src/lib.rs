//! Intention-conditioned multi-vehicle trajectory prediction with
//! message passing, MPC tracking and a four-way intersection simulator.

pub mod arm;
pub mod bicycle;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mpc;
pub mod net;
pub mod parallel;
pub mod scene;
pub mod sim;
pub mod tracks;
pub mod train;

pub use error::{Error, Result};

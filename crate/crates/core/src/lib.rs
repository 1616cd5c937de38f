//! Quasi-static feeder simulation with smart-inverter droop dynamics, an
//! oscillation observer, attack scenarios and a PPO defender.
//!
//! The pieces compose bottom-up: [`feeder`] solves the network,
//! [`inverter`] holds the droop laws, [`detector`] turns voltage swings into
//! an energy signal, [`scenario`] draws randomized episodes, [`env`] couples
//! them into a step/reset environment and [`agent`] trains a policy on it.

pub mod agent;
pub mod config;
pub mod detector;
pub mod env;
pub mod error;
pub mod eval;
pub mod feeder;
pub mod inverter;
pub mod log;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};

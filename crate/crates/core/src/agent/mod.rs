//! PPO defender: networks, optimizer, advantage estimation, updates,
//! training loop and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gae;
pub mod mlp;
pub mod policy;
pub mod ppo;
pub mod train;

//! Everything around the model that touches the filesystem: image files,
//! datasets, synthetic scenes, run configs and the command implementations.

pub mod commands;
pub mod config;
pub mod data;
pub mod imageio;
pub mod synthetic;

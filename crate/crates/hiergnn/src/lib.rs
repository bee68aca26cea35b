//! File formats, checkpoints, parallel training and the command-line
//! surface around [`hiergnn_core`].

pub mod analyze;
pub mod cli;
pub mod config;
pub mod data;
pub mod store;
pub mod train;
pub mod verify;

pub use hiergnn_core as core;

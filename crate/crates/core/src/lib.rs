//! Rewind-and-refine data collection on a discrete gridworld.

pub mod datastore;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod fleet;
pub mod gridworld;
pub mod operator;
pub mod policies;
pub mod sentinel;
pub mod session;

pub use error::{Error, Result};

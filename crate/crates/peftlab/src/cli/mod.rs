//! Configuration-driven experiment runner.

pub mod config;
pub mod csvio;
pub mod data;
pub mod run;

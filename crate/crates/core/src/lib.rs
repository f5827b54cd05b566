//! Weakly supervised semantic parsing over structured three-box scenes.

pub mod consistency;
pub mod error;
pub mod eval;
pub mod executor;
pub mod experiment;
pub mod generator;
pub mod language;
pub mod model;
pub mod pairing;
pub mod scene;
pub mod search;
pub mod training;

pub use error::{Error, Result};

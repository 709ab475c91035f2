//! Concept activation vectors, TCAV scores and their large-sample distributions.

pub mod cav;
pub mod classify;
pub mod error;
pub mod ingest;
pub mod rmt;
pub mod simulate;
pub mod statfun;
pub mod tcav;

pub use error::{Error, Result};

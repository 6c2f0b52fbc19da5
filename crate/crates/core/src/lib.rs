//! Layered neural video decomposition with hypernetwork-generated weights.

pub mod atlas;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod hypernet;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mrhe;
pub mod trainer;

pub use error::{Error, Result};

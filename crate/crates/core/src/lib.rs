//! Document layouts as graphs, a message-passing VAE/GAN that learns to
//! generate them, rule-based validation of generated layouts, and metrics
//! for their diversity and downstream usefulness.

pub mod error;
pub mod graph;
pub mod io;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod synthesis;

pub use error::{Error, Result};

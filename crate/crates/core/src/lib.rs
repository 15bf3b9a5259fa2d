pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod spatial_bias;
pub mod train;
pub mod vision;

pub use error::{Result, TiltError};

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod frame;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod proposals;
pub mod rla;
pub mod s2l;
pub mod scene;
pub mod selectors;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

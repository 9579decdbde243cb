//! Stereo matching with a neural Markov random field over a small set of
//! candidate disparities per pixel.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod features;
pub mod model;
pub mod nmrf;
pub mod nn;
pub mod observed;
pub mod proposal;
pub mod refine;
pub mod report;
pub mod supervision;
pub mod train;

pub use error::{Error, Result};

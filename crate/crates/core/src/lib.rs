//! Unit-based speaking-style transfer for speech emotion recognition data
//! augmentation.

pub mod audio;
pub mod augment;
pub mod config;
pub mod corpus;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod quantize;
pub mod ser;
pub mod toy;
pub mod train;

pub use error::{Error, Result};

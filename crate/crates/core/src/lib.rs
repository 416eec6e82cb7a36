//! Multistage multitask network for joint 2D pose, body-part labeling and
//! 3D pose reconstruction, together with a synthetic data generator, a
//! training loop and evaluation metrics.

pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod network;
pub mod params;
pub mod skeleton;
pub mod syndata;
pub mod trainer;

pub use error::{Error, Result};
pub use humansense_autodiff as autodiff;

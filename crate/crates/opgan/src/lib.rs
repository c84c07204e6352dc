//! Training and inference for 1-D operational GANs that restore
//! full-bandwidth accelerometer signals from band-limited recordings.

pub mod adam;
pub mod bench;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod signal;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor3;

//! Single-network scene text detection and recognition: a recurrent spatial
//! transformer finds text regions, a shared recognition network reads them,
//! and both train from text labels alone.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod labels;
pub mod model;
pub mod optim;
pub mod params;
pub mod recurrent;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

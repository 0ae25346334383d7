//! Bi-level routing attention U-Net for 2D segmentation.

pub mod bra;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod sccsa;
pub mod train;

pub use config::Config;
pub use error::{BrauError, Result};
pub use labels::LabelMap;
pub use model::Model;

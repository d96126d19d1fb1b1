pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;

pub use error::{Error, Result};
pub mod data;
pub mod heatmap;
pub mod losses;
pub mod model;
pub mod optim;
pub mod selftest;
pub mod train;

pub mod arrays;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod kinematics;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod records;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};

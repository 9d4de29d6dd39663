pub mod align;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fewshot;
pub mod lm;
pub mod numcore;
pub mod parallel;
pub mod projector;
pub mod speechsim;

pub use error::{Error, Result};

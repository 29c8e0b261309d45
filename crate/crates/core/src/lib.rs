pub mod base;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod flow;
pub mod layers;
pub mod matrix;
pub mod nets;
pub mod numerics;
pub mod rng;
pub mod targets;
pub mod training;

pub use error::{FlowError, Result};
pub use matrix::Matrix;
pub use rng::RngStream;

pub mod checkpoint;
pub mod deam;
pub mod dgwr;
pub mod error;
pub mod evaluation;
pub mod expert;
pub mod features;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{MsdemError, Result};

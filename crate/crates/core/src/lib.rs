pub mod autodiff;
mod binio;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod exec;
pub mod harness;
pub mod hash;
pub mod meta;
pub mod model;
pub mod real;
pub mod rng;

pub use error::{Error, Result};
pub use real::Real;

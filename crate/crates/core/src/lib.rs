pub mod cli;
pub mod conditioning;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod motion;
pub mod music;
pub mod numeric;
mod par;
pub mod transformer;

pub use error::{Error, Result};

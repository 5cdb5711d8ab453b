pub mod catalog;
pub mod closed_loop;
pub mod control;
pub mod discovery;
pub mod dynamics;
pub mod error;
pub mod integrator;
pub mod sections;
pub mod stability;

pub use dynamics::{StateVector, SystemParams};
pub use error::{Error, Result};

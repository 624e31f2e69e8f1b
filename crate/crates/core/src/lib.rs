pub mod bsde;
pub mod chaos;
pub mod counterexample;
pub mod error;
pub mod levy;
pub mod malliavin;
pub mod oracle;
pub mod quad;
pub mod regularity;
pub mod rng;
pub mod runner;
pub mod stats;

pub use error::{Error, Result};

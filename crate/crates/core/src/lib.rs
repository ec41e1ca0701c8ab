pub mod adapt;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod diffnet;
pub mod error;
pub mod model;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};

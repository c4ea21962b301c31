pub mod criteria;
pub mod data;
pub mod error;
pub mod exec;
pub mod fim;
pub mod fixtures;
pub mod graph;
pub mod harness;
pub mod masking;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Exec;

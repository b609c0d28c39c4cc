pub mod crf;
pub mod error;
pub mod lattice;
pub mod metrics;
pub mod oracle;
pub mod synth;
pub mod unary_net;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};

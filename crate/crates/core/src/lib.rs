pub mod config;
pub mod conllu;
pub mod error;
pub mod features;
pub mod gradsuite;
pub mod ho;
pub mod metrics;
pub mod model;
pub mod pgn;
pub mod srl;
pub mod synth;
pub mod train;
pub mod transfer;
pub mod tree;

pub use error::{Error, Result};

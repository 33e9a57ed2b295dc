//! File formats, training driver, benchmark and command line for patch-graph
//! style transfer. The model itself lives in `pgs-core`.

pub mod archive;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod settings;
pub mod train;

pub use error::{PgsError, Result};

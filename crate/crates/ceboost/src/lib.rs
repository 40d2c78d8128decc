//! File formats, configuration, canonical experiments and the command-line
//! front end for `ceboost-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod io;

pub use config::{Config, SystemKind};
pub use error::{CliError, Result};
pub use experiments::{Detection, Setup};

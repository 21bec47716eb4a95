//! Command-line pipeline and HTTP query service.

pub mod config;
pub mod http;
pub mod snapshot;

pub use snapshot::{Snapshot, Sources};

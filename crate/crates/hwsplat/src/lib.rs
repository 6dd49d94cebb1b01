//! File formats, threaded drivers and the `hwsplat` command line on top of
//! `hwsplat-core`.

pub mod camera;
pub mod cli;
pub mod error;
pub mod gradfile;
pub mod image;
pub mod parallel;
pub mod ply;
pub mod report;

pub use error::{IoError, Result};

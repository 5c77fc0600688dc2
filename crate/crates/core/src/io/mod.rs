//! File formats, run configuration and the on-disk dataset layout.

mod config;
mod dataset;
mod image;
mod tum;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{PathsConfig, RunConfig};
pub use dataset::{load_dataset, load_intrinsics, write_dataset, Dataset, DiskFlow, FLOW_PAIR_DIR};
pub use image::{
    decode_p4, decode_p6, decode_pfm, encode_p4, encode_p6, encode_pfm, read_p4, read_p6, read_pfm, write_p4, write_p6,
    write_pfm, FloatMap,
};
pub use tum::{format_tum, parse_tum, read_tum_trajectory, write_tum_trajectory, QUATERNION_TOLERANCE};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("trajectory has no poses")]
    EmptyTrajectory,
    #[error("config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl IoError {
    /// Attaches `path` to an I/O failure.
    pub fn at(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
        move |source| IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

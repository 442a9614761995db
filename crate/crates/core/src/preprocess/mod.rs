//! From raw multichannel series to normalized temporal tokens.

mod patch;
mod revin;
mod series;
mod windows;

pub use patch::{embed_patches, make_patches, PatchConfig};
pub use revin::{Revin, RevinAffine, RevinMode, RevinState};
pub use series::{is_valid_timestamp, load_csv, read_csv, Series};
pub use windows::{
    build_windows, build_windows_with_stats, ChannelStats, Split, SplitRatios, Window, WindowOptions, WindowedDataset,
};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("empty {split} split: {detail}")]
    EmptySplit { split: Split, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("csv row {row}, column {column}: {message}")]
    Csv { row: usize, column: usize, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Experiment orchestration for the timesaf forecaster: TOML experiment
//! specs, a dataset registry, training and transfer protocols, sweeps and
//! CSV reports.

pub mod cli;
pub mod config;
pub mod protocols;
pub mod registry;
pub mod report;

pub use config::{
    EmbeddingKind, EmbeddingSettings, ExperimentSpec, Placement, Preset, PromptSettings, Task, TheorySettings,
};
pub use protocols::{EvalOutput, Harness, HorizonForecasts, TheoryReport, TheoryRow, TrainedCell};
pub use registry::{CsvDataset, DatasetEntry, Registry};
pub use report::{AverageRow, RunReport, RunRow, AVERAGE_LABEL};

use timesaf::model::ModelError;
use timesaf::numerics::NumericsError;
use timesaf::preprocess::PreprocessError;
use timesaf::prompts::PromptError;
use timesaf::theory::TheoryError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("unknown dataset {id:?}; registered: {known}")]
    UnknownDataset { id: String, known: String },
    #[error("cannot transfer from {from} ({from_channels} channels) to {to} ({to_channels} channels)")]
    Transfer {
        from: String,
        from_channels: usize,
        to: String,
        to_channels: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("config parse: {0}")]
    TomlRead(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

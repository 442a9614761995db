//! End-to-end forecaster: schedule, forward pass, objective and training.

mod baseline;
mod config;
mod objective;
mod timesaf;
mod train;

pub use baseline::LinearBaseline;
pub use config::{ModelConfig, Schedule, Variant};
pub use objective::{data_loss, loss, metrics, MetricAccumulator, Metrics};
pub use timesaf::{Branch, Features, ForwardOutput, TimeSaf, WiringEvent};
pub use train::{
    evaluate, forecast_batch, make_batch, train, EpochRecord, ForecastBatch, Forecaster, History, PromptSource,
    TrainConfig,
};

use crate::blocks::BlockError;
use crate::numerics::{NumericsError, Params, Precision, Var};
use crate::preprocess::PreprocessError;
use crate::prompts::PromptError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl Forecaster for TimeSaf {
    fn lookback(&self) -> usize {
        self.config().patch.lookback
    }

    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn n_vars(&self) -> usize {
        self.config().n_vars
    }

    fn prompt_dim(&self) -> Option<usize> {
        Some(self.config().d_llm)
    }

    fn precision(&self) -> Precision {
        self.config().precision
    }

    fn store(&self) -> &crate::numerics::ParameterStore {
        TimeSaf::store(self)
    }

    fn store_mut(&mut self) -> &mut crate::numerics::ParameterStore {
        TimeSaf::store_mut(self)
    }

    fn predict<'t>(&self, p: &Params<'t>, x: &Var<'t>, e: Option<&Var<'t>>) -> Result<Var<'t>, ModelError> {
        let e = e.ok_or_else(|| ModelError::Config("forward needs prompt embeddings".into()))?;
        Ok(self.forward(p, x, e, &crate::blocks::Tracer::disabled())?.forecast)
    }
}

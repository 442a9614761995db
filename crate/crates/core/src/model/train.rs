use serde::{Deserialize, Serialize};

use crate::numerics::{AdamConfig, ParameterStore, Params, Precision, Tape, Tensor, Var};
use crate::preprocess::{Split, WindowedDataset};
use crate::prompts::{batch_embeddings, Embedder, EmbeddingProvider, PromptTemplateSpec};

use super::objective::{data_loss, MetricAccumulator, Metrics};
use super::ModelError;

/// A trainable model mapping `[B, L, N]` histories to `[B, H, N]` forecasts.
pub trait Forecaster {
    fn lookback(&self) -> usize;
    fn horizon(&self) -> usize;
    fn n_vars(&self) -> usize;
    /// Prompt embedding width, or `None` for models that ignore prompts.
    fn prompt_dim(&self) -> Option<usize>;
    fn precision(&self) -> Precision {
        Precision::F64
    }
    fn store(&self) -> &ParameterStore;
    fn store_mut(&mut self) -> &mut ParameterStore;
    fn predict<'t>(&self, p: &Params<'t>, x: &Var<'t>, e: Option<&Var<'t>>) -> Result<Var<'t>, ModelError>;
}

/// Renders and embeds per-window prompts.
#[derive(Clone, Debug)]
pub struct PromptSource {
    pub spec: PromptTemplateSpec,
    pub provider: EmbeddingProvider,
}

/// One mini-batch: inputs, targets and optional prompt embeddings.
#[derive(Clone, Debug)]
pub struct ForecastBatch {
    /// `[B, L, N]`
    pub x: Tensor,
    /// `[B, H, N]`
    pub y: Tensor,
    /// `[B, D_llm, N]`
    pub e: Option<Tensor>,
}

pub fn make_batch(
    ds: &WindowedDataset,
    starts: &[usize],
    prompts: Option<&PromptSource>,
) -> Result<ForecastBatch, ModelError> {
    let (x, y) = ds.batch(starts)?;
    let e = match prompts {
        Some(ps) => Some(batch_embeddings(ds, starts, &ps.spec, &ps.provider)?),
        None => None,
    };
    Ok(ForecastBatch { x, y, e })
}

fn check_compat(
    model: &impl Forecaster,
    ds: &WindowedDataset,
    prompts: Option<&PromptSource>,
) -> Result<(), ModelError> {
    if ds.lookback() != model.lookback() || ds.horizon() != model.horizon() || ds.num_channels() != model.n_vars() {
        return Err(ModelError::Config(format!(
            "dataset windows (L={}, H={}, N={}) do not fit the model (L={}, H={}, N={})",
            ds.lookback(),
            ds.horizon(),
            ds.num_channels(),
            model.lookback(),
            model.horizon(),
            model.n_vars()
        )));
    }
    match (model.prompt_dim(), prompts) {
        (Some(_), None) => Err(ModelError::Config("model needs a prompt source".into())),
        (Some(d), Some(ps)) if ps.provider.dim() != d => Err(ModelError::Config(format!(
            "embedding provider has width {}, model expects {d}",
            ps.provider.dim()
        ))),
        _ => Ok(()),
    }
}

/// Forward pass in evaluation mode.
pub fn forecast_batch(model: &impl Forecaster, batch: &ForecastBatch) -> Result<Tensor, ModelError> {
    let tape = Tape::with_precision(model.precision());
    let p = model.store().bind(&tape);
    let x = tape.constant(batch.x.clone());
    let e = batch.e.as_ref().map(|e| tape.constant(e.clone()));
    Ok(model.predict(&p, &x, e.as_ref())?.value().clone())
}

/// Metrics over every window of `split`, batched without dropping the remainder.
pub fn evaluate(
    model: &impl Forecaster,
    ds: &WindowedDataset,
    split: Split,
    prompts: Option<&PromptSource>,
    batch_size: usize,
) -> Result<Metrics, ModelError> {
    check_compat(model, ds, prompts)?;
    let starts = ds.starts(split);
    let mut acc = MetricAccumulator::default();
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = make_batch(ds, chunk, prompts)?;
        acc.update(&forecast_batch(model, &batch)?, &batch.y)?;
    }
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// The `alpha` of the `alpha * sum(theta^2)` penalty.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            eval_batch_size: 256,
            max_epochs: 50,
            patience: 5,
            max_steps: None,
            weight_decay: 0.0,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    /// Mean objective over the epoch's batches, decay term included.
    pub train_loss: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Adam with validation-MSE early stopping. The parameters of the best
/// validation epoch are restored before returning.
pub fn train(
    model: &mut impl Forecaster,
    ds: &WindowedDataset,
    prompts: Option<&PromptSource>,
    tc: &TrainConfig,
) -> Result<History, ModelError> {
    check_compat(model, ds, prompts)?;
    if ds.count(Split::Train) == 0 {
        return Err(ModelError::Config("empty train split".into()));
    }
    if tc.batch_size == 0 {
        return Err(ModelError::Config("batch size must be positive".into()));
    }
    model.store_mut().hyper = tc.adam();
    model.store_mut().zero_grad();

    let mut history = History {
        best_val_mse: f64::INFINITY,
        ..Default::default()
    };
    let mut best: Option<Vec<(String, Tensor)>> = None;
    let mut stale = 0;
    'epochs: for epoch in 0..tc.max_epochs {
        let order = ds.shuffled_train(tc.seed, epoch as u64);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut acc = MetricAccumulator::default();
        let mut capped = false;
        for chunk in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| history.steps >= m) {
                capped = true;
                break;
            }
            let batch = make_batch(ds, chunk, prompts)?;
            let tape = Tape::with_precision(model.precision());
            tape.set_training(
                true,
                tc.seed ^ (history.steps as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let p = model.store().bind(&tape);
            let x = tape.constant(batch.x.clone());
            let y = tape.constant(batch.y.clone());
            let e = batch.e.as_ref().map(|e| tape.constant(e.clone()));
            let y_hat = model.predict(&p, &x, e.as_ref())?;
            let l = data_loss(&y_hat, &y)?;
            let grads = tape.backward(&l)?;
            loss_sum += l.value().item();
            batches += 1;
            acc.update(y_hat.value(), &batch.y)?;
            let store = model.store_mut();
            store.accumulate(&p, &grads);
            store.adam_step();
            history.steps += 1;
        }
        if batches == 0 {
            break;
        }
        let val = evaluate(model, ds, Split::Val, prompts, tc.eval_batch_size)?;
        let decay = tc.weight_decay * model.store().sum_squares();
        history.epochs.push(EpochRecord {
            epoch,
            steps: history.steps,
            train_loss: loss_sum / batches as f64 + decay,
            train_mse: acc.finish().mse,
            val_mse: val.mse,
            val_mae: val.mae,
        });
        if val.mse < history.best_val_mse {
            history.best_val_mse = val.mse;
            history.best_epoch = epoch;
            best = Some(model.store().iter().map(|(n, t)| (n.to_string(), t.clone())).collect());
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                history.stopped_early = true;
                break 'epochs;
            }
        }
        if capped || tc.max_steps.is_some_and(|m| history.steps >= m) {
            break;
        }
    }
    if let Some(best) = best {
        let store = model.store_mut();
        for (name, value) in best {
            store.set(&name, value)?;
        }
    }
    Ok(history)
}

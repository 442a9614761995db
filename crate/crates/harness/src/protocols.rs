//! Experiment protocols. Every cell trains with the spec's seed, so cells
//! that differ only in model variant see identical batches.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use timesaf::blocks::Tracer;
use timesaf::model::{evaluate, forecast_batch, make_batch, train, History, ModelConfig, PromptSource, TimeSaf};
use timesaf::numerics::{Checkpoint, Tape, Tensor};
use timesaf::preprocess::{build_windows, Series, Split, WindowOptions, WindowedDataset};
use timesaf::prompts::{render_window, PromptTemplateSpec};
use timesaf::theory::{gate_attenuation_curve, simulate_accumulation, GateRow, NoiseSpec, SimulationResult};

use crate::config::{ExperimentSpec, Task};
use crate::registry::{DatasetEntry, Registry};
use crate::report::{RunReport, RunRow};
use crate::HarnessError;

pub struct Harness {
    pub spec: ExperimentSpec,
    pub registry: Registry,
}

/// A model trained on one dataset and horizon.
pub struct TrainedCell {
    pub model: TimeSaf,
    pub history: History,
    pub data: WindowedDataset,
    pub prompts: PromptSource,
}

/// Forecasts of every test window, `[B, H, N]`.
#[derive(Clone, Debug)]
pub struct HorizonForecasts {
    pub horizon: usize,
    pub starts: Vec<usize>,
    pub values: Tensor,
}

pub struct EvalOutput {
    pub report: RunReport,
    pub forecasts: Vec<HorizonForecasts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryRow {
    pub depth: usize,
    pub stages: usize,
    pub correlation: String,
    pub result: SimulationResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryReport {
    pub rows: Vec<TheoryRow>,
    pub gates: Vec<GateRow>,
}

pub fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

impl Harness {
    pub fn new(spec: ExperimentSpec) -> Result<Self, HarnessError> {
        let registry = Registry::builtin().with_csv(&spec.datasets)?;
        Ok(Self { spec, registry })
    }

    /// Hash of everything that determines results; the output location is excluded.
    pub fn spec_hash(&self) -> String {
        let spec = ExperimentSpec {
            output_dir: None,
            ..self.spec.clone()
        };
        short_hash(&spec.to_toml())
    }

    pub fn prompt_source(&self, entry: &DatasetEntry, dim: usize) -> Result<PromptSource, HarnessError> {
        let p = &self.spec.prompts;
        Ok(PromptSource {
            spec: PromptTemplateSpec {
                variant: p.variant,
                frequency: p.frequency.clone().unwrap_or_else(|| entry.frequency.clone()),
                precision: p.precision,
                domain: p.domain.clone().unwrap_or_else(|| entry.domain.clone()),
                trend: p.trend,
            },
            provider: self.spec.embeddings.provider(dim)?,
        })
    }

    fn windows(
        &self,
        entry: &DatasetEntry,
        series: &Series,
        lookback: usize,
        horizon: usize,
        few_shot_fraction: Option<f64>,
    ) -> Result<WindowedDataset, HarnessError> {
        Ok(build_windows(
            series,
            &WindowOptions {
                lookback,
                horizon,
                ratios: entry.ratios(),
                few_shot_fraction,
                zscore: self.spec.zscore,
            },
        )?)
    }

    /// Trains one model and, when an output directory is set, saves its checkpoint.
    pub fn fit(
        &self,
        entry: &DatasetEntry,
        series: &Series,
        cfg: ModelConfig,
        few_shot_fraction: Option<f64>,
        label: &str,
    ) -> Result<TrainedCell, HarnessError> {
        let data = self.windows(entry, series, cfg.patch.lookback, cfg.horizon, few_shot_fraction)?;
        let prompts = self.prompt_source(entry, cfg.d_llm)?;
        let mut model = TimeSaf::new(cfg, self.spec.train.adam())?;
        let history = train(&mut model, &data, Some(&prompts), &self.spec.train)?;
        if let Some(dir) = &self.spec.output_dir {
            let path = dir.join("checkpoints").join(format!("{label}.tsaf"));
            std::fs::create_dir_all(path.parent().expect("checkpoint path has a parent"))?;
            model.checkpoint().save(&path)?;
        }
        Ok(TrainedCell {
            model,
            history,
            data,
            prompts,
        })
    }

    /// Test-split metrics of `model` on `data` as one report row.
    fn test_row(
        &self,
        model: &TimeSaf,
        data: &WindowedDataset,
        prompts: &PromptSource,
        dataset: &str,
        setting: &str,
    ) -> Result<RunRow, HarnessError> {
        let m = evaluate(model, data, Split::Test, Some(prompts), self.spec.train.eval_batch_size)?;
        let cfg = model.config();
        Ok(RunRow {
            dataset: dataset.into(),
            horizon: cfg.horizon,
            variant: cfg.variant.to_string(),
            setting: setting.into(),
            mse: m.mse,
            mae: m.mae,
            fusion_calls: fusion_calls(model, data, prompts)?,
            config_hash: short_hash(&model.config_text()),
        })
    }

    fn load(&self, id: &str) -> Result<(DatasetEntry, Series), HarnessError> {
        let entry = self.registry.get(id)?.clone();
        let series = entry.load()?;
        Ok((entry, series))
    }

    fn report(&self, task: Task, rows: Vec<RunRow>, notes: Vec<String>, started: Instant) -> RunReport {
        let mut r = RunReport::new(task, self.spec.train.seed, self.spec_hash(), rows, notes);
        r.wall_time_secs = started.elapsed().as_secs_f64();
        r
    }

    fn horizon_runs(&self, task: Task, few_shot_fraction: Option<f64>) -> Result<RunReport, HarnessError> {
        let started = Instant::now();
        let (entry, series) = self.load(&self.spec.dataset)?;
        let mut rows = Vec::new();
        for &h in &self.spec.horizons {
            let cfg = self.spec.model_config(series.num_channels(), h)?;
            let label = format!("{}_{}_h{h}", entry.id, cfg.variant);
            let cell = self.fit(&entry, &series, cfg, few_shot_fraction, &label)?;
            rows.push(self.test_row(&cell.model, &cell.data, &cell.prompts, &entry.id, "")?);
        }
        let mut notes = Vec::new();
        if let Some(f) = few_shot_fraction {
            notes.push(format!("trained on the first {f} of the train split"));
        }
        Ok(self.report(task, rows, notes, started))
    }

    /// One model per horizon, evaluated on the test split.
    pub fn run_long_term(&self) -> Result<RunReport, HarnessError> {
        self.horizon_runs(Task::LongTerm, None)
    }

    /// Like [`run_long_term`](Self::run_long_term) on a prefix of the train split.
    pub fn run_few_shot(&self) -> Result<RunReport, HarnessError> {
        self.horizon_runs(Task::FewShot, Some(self.spec.few_shot_fraction))
    }

    /// Trains on the source (or loads a source checkpoint) and evaluates
    /// on the target's test split without further training.
    pub fn run_zero_shot(&self) -> Result<RunReport, HarnessError> {
        let started = Instant::now();
        let source_id = self.spec.source.as_deref().unwrap_or(&self.spec.dataset);
        let target_id = self
            .spec
            .target
            .as_deref()
            .ok_or_else(|| HarnessError::Config("zero-shot needs a target dataset".into()))?;
        let (source, source_series) = self.load(source_id)?;
        let (target, target_series) = self.load(target_id)?;
        if source_series.num_channels() != target_series.num_channels() {
            return Err(HarnessError::Transfer {
                from: source.id,
                from_channels: source_series.num_channels(),
                to: target.id,
                to_channels: target_series.num_channels(),
            });
        }
        let label = format!("{}->{}", source.id, target.id);
        let mut notes = vec![format!(
            "prompts use the target frequency label ({})",
            self.prompt_source(&target, 1)?.spec.frequency
        )];
        let models: Vec<TimeSaf> = match &self.spec.checkpoint {
            Some(path) => {
                notes.push(format!("source parameters from {}", path.display()));
                vec![TimeSaf::from_checkpoint(
                    &Checkpoint::load(path)?,
                    self.spec.train.adam(),
                )?]
            }
            None => self
                .spec
                .horizons
                .iter()
                .map(|&h| {
                    let cfg = self.spec.model_config(source_series.num_channels(), h)?;
                    let name = format!("{}_{}_h{h}", source.id, cfg.variant);
                    Ok(self.fit(&source, &source_series, cfg, None, &name)?.model)
                })
                .collect::<Result<_, HarnessError>>()?,
        };
        let mut rows = Vec::new();
        for model in &models {
            let cfg = model.config();
            if cfg.n_vars != target_series.num_channels() {
                return Err(HarnessError::Transfer {
                    from: source.id.clone(),
                    from_channels: cfg.n_vars,
                    to: target.id.clone(),
                    to_channels: target_series.num_channels(),
                });
            }
            let data = self.windows(&target, &target_series, cfg.patch.lookback, cfg.horizon, None)?;
            let prompts = self.prompt_source(&target, cfg.d_llm)?;
            rows.push(self.test_row(model, &data, &prompts, &label, "")?);
        }
        Ok(self.report(Task::ZeroShot, rows, notes, started))
    }

    /// Every listed variant per horizon under one seed.
    pub fn run_ablation(&self) -> Result<RunReport, HarnessError> {
        let started = Instant::now();
        let (entry, series) = self.load(&self.spec.dataset)?;
        let mut rows = Vec::new();
        for &h in &self.spec.horizons {
            for &variant in &self.spec.variants {
                let cfg = ModelConfig {
                    variant,
                    ..self.spec.model_config(series.num_channels(), h)?
                };
                let label = format!("{}_{variant}_h{h}", entry.id);
                let cell = self.fit(&entry, &series, cfg, None, &label)?;
                rows.push(self.test_row(&cell.model, &cell.data, &cell.prompts, &entry.id, "")?);
            }
        }
        Ok(self.report(Task::Ablation, rows, Vec::new(), started))
    }

    /// Grid over stage counts and fusion-layer placements.
    pub fn run_stage_sweep(&self) -> Result<RunReport, HarnessError> {
        let started = Instant::now();
        let (entry, series) = self.load(&self.spec.dataset)?;
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        for &h in &self.spec.horizons {
            let base = self.spec.model_config(series.num_channels(), h)?;
            for &stages in &self.spec.stages {
                for &placement in &self.spec.placements {
                    let kappa = match placement.fusion_layers(base.depth, stages) {
                        Ok(k) => k,
                        Err(reason) => {
                            let note = format!("skipped S={stages}: {reason}");
                            if !notes.contains(&note) {
                                notes.push(note);
                            }
                            break;
                        }
                    };
                    let kappa_text: Vec<String> = kappa.iter().map(usize::to_string).collect();
                    let setting = format!("s{stages}_{}_k{}", placement.as_str(), kappa_text.join("-"));
                    let cfg = ModelConfig {
                        stages,
                        fusion_layers: Some(kappa),
                        refine_layers: None,
                        ..base.clone()
                    };
                    let label = format!("{}_{}_{setting}_h{h}", entry.id, cfg.variant);
                    let cell = self.fit(&entry, &series, cfg, None, &label)?;
                    rows.push(self.test_row(&cell.model, &cell.data, &cell.prompts, &entry.id, &setting)?);
                }
            }
        }
        Ok(self.report(Task::StageSweep, rows, notes, started))
    }

    pub fn run_theory(&self) -> Result<TheoryReport, HarnessError> {
        let t = &self.spec.theory;
        let mut rows = Vec::new();
        for &stages in &t.stages {
            for &correlation in &t.correlations {
                let spec = self.noise_spec(stages, correlation);
                rows.push(TheoryRow {
                    depth: t.depth,
                    stages,
                    correlation: correlation.to_string(),
                    result: simulate_accumulation(&spec)?,
                });
            }
        }
        let base = self.noise_spec(
            t.stages.first().copied().unwrap_or(0),
            t.correlations
                .first()
                .copied()
                .unwrap_or(timesaf::theory::Correlation::Iid),
        );
        Ok(TheoryReport {
            rows,
            gates: gate_attenuation_curve(&base, &t.gates),
        })
    }

    fn noise_spec(&self, stages: usize, correlation: timesaf::theory::Correlation) -> NoiseSpec {
        let t = &self.spec.theory;
        NoiseSpec {
            sigma: t.sigma,
            correlation,
            lambda: t.lambda,
            stage_lambdas: Vec::new(),
            depth: t.depth,
            stages,
            trials: t.trials,
            seed: t.seed,
        }
    }

    /// Runs the spec's task. Theory has its own report type; see [`run_theory`](Self::run_theory).
    pub fn run(&self) -> Result<RunReport, HarnessError> {
        match self.spec.task {
            Task::LongTerm => self.run_long_term(),
            Task::FewShot => self.run_few_shot(),
            Task::ZeroShot => self.run_zero_shot(),
            Task::Ablation => self.run_ablation(),
            Task::StageSweep => self.run_stage_sweep(),
            Task::Theory => Err(HarnessError::Config("theory runs produce a theory report".into())),
        }
    }

    /// Test-split metrics and forecasts of saved checkpoints on the spec's dataset.
    pub fn evaluate_checkpoints(&self, paths: &[PathBuf]) -> Result<EvalOutput, HarnessError> {
        let started = Instant::now();
        let (entry, series) = self.load(&self.spec.dataset)?;
        let mut rows = Vec::new();
        let mut forecasts = Vec::new();
        let mut notes = Vec::new();
        for path in paths {
            let model = TimeSaf::from_checkpoint(&Checkpoint::load(path)?, self.spec.train.adam())?;
            let cfg = model.config();
            if cfg.n_vars != series.num_channels() {
                return Err(HarnessError::Config(format!(
                    "{} expects {} channels, {} has {}",
                    path.display(),
                    cfg.n_vars,
                    entry.id,
                    series.num_channels()
                )));
            }
            let data = self.windows(&entry, &series, cfg.patch.lookback, cfg.horizon, None)?;
            let prompts = self.prompt_source(&entry, cfg.d_llm)?;
            rows.push(self.test_row(&model, &data, &prompts, &entry.id, "")?);
            let f = test_forecasts(&model, &data, &prompts, self.spec.train.eval_batch_size)?;
            notes.push(format!("h={} forecasts shaped {:?}", f.horizon, f.values.shape()));
            forecasts.push(f);
        }
        Ok(EvalOutput {
            report: self.report(Task::LongTerm, rows, notes, started),
            forecasts,
        })
    }

    /// Prompts of the spec's dataset at lookback `L` and the first horizon,
    /// one per variable and window, deduplicated in order of appearance.
    pub fn render_prompts(&self, split: Option<Split>, window: Option<usize>) -> Result<Vec<String>, HarnessError> {
        let (entry, series) = self.load(&self.spec.dataset)?;
        let cfg = self.spec.model_config(series.num_channels(), self.spec.horizons[0])?;
        let data = self.windows(&entry, &series, cfg.patch.lookback, cfg.horizon, None)?;
        let template = self.prompt_source(&entry, cfg.d_llm)?.spec;
        let starts: Vec<usize> = match split {
            Some(s) => data.starts(s),
            None => data.windows().iter().map(|w| w.start).collect(),
        };
        let starts = match window {
            Some(i) => vec![*starts
                .get(i)
                .ok_or_else(|| HarnessError::Config(format!("window {i} out of range ({} windows)", starts.len())))?],
            None => starts,
        };
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in starts {
            for text in render_window(&data, s, &template) {
                if seen.insert(text.clone()) {
                    out.push(text);
                }
            }
        }
        Ok(out)
    }

    /// Traces one test window through a checkpoint. Writes the head-averaged
    /// attention rows of batch row `row` and the final hidden states of both
    /// branches plus every fusion memory, one token per CSV line.
    pub fn dump_attention(
        &self,
        checkpoint: &Path,
        window: usize,
        row: usize,
        dir: &Path,
    ) -> Result<Vec<PathBuf>, HarnessError> {
        let (entry, series) = self.load(&self.spec.dataset)?;
        let model = TimeSaf::from_checkpoint(&Checkpoint::load(checkpoint)?, self.spec.train.adam())?;
        let cfg = model.config();
        let data = self.windows(&entry, &series, cfg.patch.lookback, cfg.horizon, None)?;
        let prompts = self.prompt_source(&entry, cfg.d_llm)?;
        let starts = data.starts(Split::Test);
        let start = *starts.get(window).ok_or_else(|| {
            HarnessError::Config(format!("window {window} out of range ({} test windows)", starts.len()))
        })?;
        if row >= cfg.n_vars {
            return Err(HarnessError::Config(format!(
                "row {row} out of range ({} variables)",
                cfg.n_vars
            )));
        }
        let batch = make_batch(&data, &[start], Some(&prompts))?;
        let tape = Tape::with_precision(cfg.precision);
        let p = model.store().bind(&tape);
        let x = tape.constant(batch.x);
        let e = tape.constant(batch.e.expect("prompt source set"));
        let tracer = Tracer::enabled();
        let out = model.forward(&p, &x, &e, &tracer)?;

        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for map in tracer.maps().iter() {
            written.push(map.write_csv(dir, row)?);
        }
        let f = &out.features;
        let mut features = vec![("features_time", &f.time), ("features_text", &f.text)];
        let names: Vec<String> = (1..=f.memories.len()).map(|s| format!("features_memory{s}")).collect();
        features.extend(names.iter().map(String::as_str).zip(&f.memories));
        for (name, t) in features {
            let path = dir.join(format!("{name}.csv"));
            write_token_matrix(&path, t)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Fusion-trunk invocations in one traced forward pass on a single window.
pub fn fusion_calls(model: &TimeSaf, data: &WindowedDataset, prompts: &PromptSource) -> Result<usize, HarnessError> {
    let start = data
        .windows()
        .first()
        .ok_or_else(|| HarnessError::Config("dataset has no windows".into()))?
        .start;
    let batch = make_batch(data, &[start], Some(prompts))?;
    let tape = Tape::with_precision(model.config().precision);
    let p = model.store().bind(&tape);
    let x = tape.constant(batch.x);
    let e = tape.constant(batch.e.expect("prompt source set"));
    Ok(model.forward(&p, &x, &e, &Tracer::disabled())?.fusion_calls())
}

pub fn test_forecasts(
    model: &TimeSaf,
    data: &WindowedDataset,
    prompts: &PromptSource,
    batch_size: usize,
) -> Result<HorizonForecasts, HarnessError> {
    let starts = data.starts(Split::Test);
    let mut values = Vec::new();
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = make_batch(data, chunk, Some(prompts))?;
        values.extend_from_slice(forecast_batch(model, &batch)?.data());
    }
    let cfg = model.config();
    Ok(HorizonForecasts {
        horizon: cfg.horizon,
        values: Tensor::new(&[starts.len(), cfg.horizon, cfg.n_vars], values)?,
        starts,
    })
}

impl HorizonForecasts {
    /// Long format: `window,step,channel,value` with `window` the series index of the window start.
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["window", "step", "channel", "value"])?;
        let &[_, h, n] = self.values.shape() else {
            unreachable!("forecasts are rank 3")
        };
        for (b, start) in self.starts.iter().enumerate() {
            for t in 0..h {
                for c in 0..n {
                    let v = self.values.data()[(b * h + t) * n + c];
                    w.write_record([start.to_string(), t.to_string(), c.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `[R, T, D]` as CSV lines `row,token,f0..f{D-1}`.
fn write_token_matrix(path: &Path, t: &Tensor) -> Result<(), HarnessError> {
    let &[r, tokens, d] = t.shape() else {
        return Err(HarnessError::Config(format!(
            "feature tensor has shape {:?}",
            t.shape()
        )));
    };
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = ["row".to_string(), "token".to_string()]
        .into_iter()
        .chain((0..d).map(|i| format!("f{i}")))
        .collect();
    w.write_record(&header)?;
    for i in 0..r {
        for j in 0..tokens {
            let base = (i * tokens + j) * d;
            let mut rec = vec![i.to_string(), j.to_string()];
            rec.extend(t.data()[base..base + d].iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

impl TheoryReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "L",
            "S",
            "correlation",
            "var_sync",
            "var_async",
            "ratio",
            "sync_bound",
            "async_bound",
        ])?;
        for r in &self.rows {
            let s = &r.result;
            w.write_record([
                r.depth.to_string(),
                r.stages.to_string(),
                r.correlation.clone(),
                s.sync.var.to_string(),
                s.asynchronous.var.to_string(),
                s.ratio.to_string(),
                s.sync_bound.to_string(),
                s.async_bound.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_gate_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["gate", "strength", "async_bound"])?;
        for g in &self.gates {
            w.write_record([g.gate.to_string(), g.strength.to_string(), g.async_bound.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:>3} {:>3} {:<17} {:>16} {:>16} {:>8} {:>10} {:>10}  bound_ok",
            "L", "S", "correlation", "var_sync", "var_async", "ratio", "sync_bnd", "async_bnd"
        )
        .unwrap();
        for r in &self.rows {
            let x = &r.result;
            writeln!(
                s,
                "{:>3} {:>3} {:<17} {:>16} {:>16} {:>8.4} {:>10.4} {:>10.4}  {}",
                r.depth,
                r.stages,
                r.correlation,
                format!("{:.4}±{:.4}", x.sync.var, x.sync.stderr),
                format!("{:.4}±{:.4}", x.asynchronous.var, x.asynchronous.stderr),
                x.ratio,
                x.sync_bound,
                x.async_bound,
                x.bound_ok
            )
            .unwrap();
        }
        s
    }
}

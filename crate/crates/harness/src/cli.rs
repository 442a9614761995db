//! Command-line front end. Every flag maps onto a key of the experiment
//! spec and overrides the config file; `--set key=value` reaches any key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use timesaf::preprocess::Split;
use toml::Value;

use crate::config::{parse_assignment, ExperimentSpec, Task};
use crate::protocols::Harness;
use crate::report::RunReport;
use crate::HarnessError;

#[derive(Parser, Debug)]
#[command(
    name = "timesaf",
    version,
    about = "Hierarchical asynchronous fusion forecaster: train, evaluate, transfer, ablate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model per horizon and report test metrics.
    Train(CommonArgs),
    /// Evaluate saved checkpoints on the test split.
    Eval(EvalArgs),
    /// Train on a prefix of the train split.
    FewShot(FewShotArgs),
    /// Evaluate a source-trained model on a target dataset.
    ZeroShot(ZeroShotArgs),
    /// Compare model variants under one seed.
    Ablate(AblateArgs),
    /// Grid over fusion stage counts and placements.
    SweepStages(SweepArgs),
    /// Simulate noise accumulation against the closed-form bounds.
    Theory(TheoryArgs),
    /// Export rendered prompts, one per line.
    RenderPrompts(RenderArgs),
    /// Export attention maps and hidden features for one test window.
    DumpAttn(DumpArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// Experiment TOML file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set model.depth=4`. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    pub set: Vec<(String, Value)>,
    /// Registered dataset id.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Comma-separated forecast horizons.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Vec<usize>,
    /// Output directory for reports and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds both parameter initialization and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Base model configuration: `standard` or `micro`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Model variant, e.g. `full` or `sync_refine`.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Precomputed embedding file; the seeded stub embedder is used otherwise.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory written by `train`; supplies the config and checkpoints.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Checkpoint files, in addition to those of `--run-dir`.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Also write every test forecast as `forecasts_h{H}.csv`.
    #[arg(long)]
    pub forecasts: bool,
}

#[derive(Args, Debug)]
pub struct FewShotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Fraction of the train split to train on.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ZeroShotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// Source checkpoint; trained in-run when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated stage counts.
    #[arg(long, value_delimiter = ',')]
    pub stages: Vec<usize>,
    /// Comma-separated placements among shallow, middle, deep.
    #[arg(long, value_delimiter = ',')]
    pub placements: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TheoryArgs {
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    pub set: Vec<(String, Value)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub stages: Vec<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Comma-separated models among iid, fully_correlated, rho=<value>.
    #[arg(long, value_delimiter = ',')]
    pub correlations: Vec<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated gate logits for the attenuation table.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub gates: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Restrict to one split: train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Window index within the selected windows.
    #[arg(long)]
    pub window: Option<usize>,
    /// Prompt variant: full, domain, timestamp or instruction.
    #[arg(long)]
    pub prompt: Option<String>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test window index.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    /// Variable whose attention rows are written.
    #[arg(long, default_value_t = 0)]
    pub row: usize,
}

struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn put(&mut self, key: &str, value: Option<impl Into<Value>>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.into()));
        }
    }

    fn put_list<T: Clone + Into<Value>>(&mut self, key: &str, values: &[T]) {
        if !values.is_empty() {
            self.0.push((
                key.to_string(),
                Value::Array(values.iter().cloned().map(Into::into).collect()),
            ));
        }
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

impl CommonArgs {
    fn overrides(&self, task: Task) -> Overrides {
        let mut o = Overrides::new();
        o.put("task", Some(task_name(task)));
        o.put("dataset", self.dataset.clone());
        o.put_list("horizons", &self.horizons.iter().map(|&h| h as i64).collect::<Vec<_>>());
        o.put("output_dir", self.out.as_deref().map(path_value));
        if let Some(seed) = self.seed {
            o.put("train.seed", Some(seed as i64));
            o.put("model.seed", Some(seed as i64));
        }
        o.put("preset", self.preset.clone());
        o.put("model.variant", self.variant.clone());
        o.put("train.lr", self.lr);
        o.put("train.batch_size", self.batch_size.map(|v| v as i64));
        o.put("train.max_epochs", self.max_epochs.map(|v| v as i64));
        o.put("train.max_steps", self.max_steps.map(|v| v as i64));
        o.put("train.patience", self.patience.map(|v| v as i64));
        if let Some(path) = &self.embeddings {
            o.put("embeddings.kind", Some("file"));
            o.put("embeddings.path", Some(path_value(path)));
        }
        o
    }

    fn spec(&self, task: Task, extra: Overrides, base: Option<&Path>) -> Result<ExperimentSpec, HarnessError> {
        let mut o = self.overrides(task);
        o.0.extend(extra.0);
        o.0.extend(self.set.iter().cloned());
        ExperimentSpec::load(self.config.as_deref().or(base), &o.0)
    }
}

fn task_name(task: Task) -> String {
    match Value::try_from(task) {
        Ok(Value::String(s)) => s,
        _ => unreachable!("task serializes to a string"),
    }
}

/// Saves the report and resolved spec when an output directory is set,
/// and returns the text table.
fn emit(spec: &ExperimentSpec, report: &RunReport) -> Result<String, HarnessError> {
    if let Some(dir) = &spec.output_dir {
        report.save(dir)?;
        let portable = ExperimentSpec {
            output_dir: None,
            ..spec.clone()
        };
        std::fs::write(dir.join("spec.toml"), portable.to_toml())?;
    }
    eprintln!("finished in {:.1} s", report.wall_time_secs);
    Ok(report.to_table())
}

fn run_task(spec: ExperimentSpec) -> Result<String, HarnessError> {
    let harness = Harness::new(spec)?;
    let report = harness.run()?;
    emit(&harness.spec, &report)
}

/// Runs one command and returns what it prints on success.
pub fn run(cli: Cli) -> Result<String, HarnessError> {
    match cli.command {
        Command::Train(c) => run_task(c.spec(Task::LongTerm, Overrides::new(), None)?),
        Command::FewShot(a) => {
            let mut o = Overrides::new();
            o.put("few_shot_fraction", a.fraction);
            run_task(a.common.spec(Task::FewShot, o, None)?)
        }
        Command::ZeroShot(a) => {
            let mut o = Overrides::new();
            o.put("source", a.source);
            o.put("target", a.target);
            o.put("checkpoint", a.checkpoint.as_deref().map(path_value));
            run_task(a.common.spec(Task::ZeroShot, o, None)?)
        }
        Command::Ablate(a) => {
            let mut o = Overrides::new();
            o.put_list("variants", &a.variants);
            run_task(a.common.spec(Task::Ablation, o, None)?)
        }
        Command::SweepStages(a) => {
            let mut o = Overrides::new();
            o.put_list("stages", &a.stages.iter().map(|&s| s as i64).collect::<Vec<_>>());
            o.put_list("placements", &a.placements);
            run_task(a.common.spec(Task::StageSweep, o, None)?)
        }
        Command::Eval(a) => eval(a),
        Command::Theory(a) => theory(a),
        Command::RenderPrompts(a) => {
            let mut o = Overrides::new();
            o.put("prompts.variant", a.prompt);
            let spec = a.common.spec(Task::LongTerm, o, None)?;
            let split = a.split.as_deref().map(parse_split).transpose()?;
            let texts = Harness::new(spec.clone())?.render_prompts(split, a.window)?;
            let mut out = String::new();
            for t in &texts {
                writeln!(out, "{t}").unwrap();
            }
            match &spec.output_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join("prompts.txt");
                    std::fs::write(&path, &out)?;
                    Ok(format!("{} prompts written to {}\n", texts.len(), path.display()))
                }
                None => Ok(out),
            }
        }
        Command::DumpAttn(a) => {
            let spec = a.common.spec(Task::LongTerm, Overrides::new(), None)?;
            let dir = spec.output_dir.clone().unwrap_or_else(|| PathBuf::from("attn"));
            let written = Harness::new(spec)?.dump_attention(&a.checkpoint, a.window, a.row, &dir)?;
            let mut out = String::new();
            for p in written {
                writeln!(out, "{}", p.display()).unwrap();
            }
            Ok(out)
        }
    }
}

fn parse_split(s: &str) -> Result<Split, HarnessError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(HarnessError::Config(format!("unknown split {s:?}"))),
    }
}

fn eval(a: EvalArgs) -> Result<String, HarnessError> {
    let base = a.run_dir.as_ref().map(|d| d.join("spec.toml"));
    let mut spec = a.common.spec(Task::LongTerm, Overrides::new(), base.as_deref())?;
    if a.common.out.is_none() {
        spec.output_dir = a.run_dir.as_ref().map(|d| d.join("eval"));
    }
    let mut paths = a.checkpoint.clone();
    if let Some(dir) = &a.run_dir {
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir.join("checkpoints"))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        found.retain(|p| p.extension().is_some_and(|x| x == "tsaf"));
        found.sort();
        paths.extend(found);
    }
    if paths.is_empty() {
        return Err(HarnessError::Config("eval needs --run-dir or --checkpoint".into()));
    }
    let harness = Harness::new(spec)?;
    let out = harness.evaluate_checkpoints(&paths)?;
    if let Some(dir) = &harness.spec.output_dir {
        std::fs::create_dir_all(dir)?;
        if a.forecasts {
            for f in &out.forecasts {
                f.write_csv(&dir.join(format!("forecasts_h{}.csv", f.horizon)))?;
            }
        }
    }
    emit(&harness.spec, &out.report)
}

fn theory(a: TheoryArgs) -> Result<String, HarnessError> {
    let mut o = Overrides::new();
    o.put("task", Some(task_name(Task::Theory)));
    o.put("output_dir", a.out.as_deref().map(path_value));
    o.put("theory.depth", a.depth.map(|v| v as i64));
    o.put_list("theory.stages", &a.stages.iter().map(|&s| s as i64).collect::<Vec<_>>());
    o.put("theory.lambda", a.lambda);
    o.put("theory.sigma", a.sigma);
    o.put_list("theory.correlations", &a.correlations);
    o.put("theory.trials", a.trials.map(|v| v as i64));
    o.put("theory.seed", a.seed.map(|v| v as i64));
    o.put_list("theory.gates", &a.gates);
    o.0.extend(a.set);
    let spec = ExperimentSpec::load(a.config.as_deref(), &o.0)?;
    let harness = Harness::new(spec)?;
    let report = harness.run_theory()?;
    if let Some(dir) = &harness.spec.output_dir {
        std::fs::create_dir_all(dir)?;
        report.write_csv(&dir.join("theory.csv"))?;
        report.write_gate_csv(&dir.join("gates.csv"))?;
    }
    Ok(report.to_table())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_keys() {
        let cli = Cli::try_parse_from([
            "timesaf",
            "train",
            "--dataset",
            "sine",
            "--horizons",
            "4,8",
            "--preset",
            "micro",
            "--seed",
            "7",
            "--lr",
            "0.01",
            "--set",
            "model.depth=4",
        ])
        .unwrap();
        let Command::Train(c) = cli.command else { panic!() };
        let spec = c.spec(Task::LongTerm, Overrides::new(), None).unwrap();
        assert_eq!(spec.dataset, "sine");
        assert_eq!(spec.horizons, vec![4, 8]);
        assert_eq!((spec.train.seed, spec.train.lr), (7, 0.01));
        let cfg = spec.model_config(2, 4).unwrap();
        assert_eq!((cfg.seed, cfg.depth), (7, 4));
    }

    #[test]
    fn flags_beat_config_file_and_set_beats_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "dataset = \"synth-3c\"\nhorizons = [96]\n[train]\nlr = 0.5\n").unwrap();
        let cli = Cli::try_parse_from([
            "timesaf",
            "train",
            "-c",
            path.to_str().unwrap(),
            "--lr",
            "0.1",
            "--set",
            "train.lr=0.2",
        ])
        .unwrap();
        let Command::Train(c) = cli.command else { panic!() };
        let spec = c.spec(Task::LongTerm, Overrides::new(), None).unwrap();
        assert_eq!((spec.dataset.as_str(), spec.train.lr), ("synth-3c", 0.2));
        assert_eq!(spec.horizons, vec![96]);
    }

    #[test]
    fn theory_gates_accept_negative_values() {
        let cli = Cli::try_parse_from([
            "timesaf",
            "theory",
            "--gates",
            "-2,0,2",
            "--correlations",
            "iid,rho=0.3",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Theory(ref t) if t.gates == vec![-2.0, 0.0, 2.0]));
    }
}

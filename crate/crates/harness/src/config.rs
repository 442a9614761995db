//! Experiment specification: a TOML file whose keys mirror the model,
//! training and protocol settings, with dotted-key overrides on top.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use timesaf::model::{ModelConfig, TrainConfig, Variant};
use timesaf::prompts::{EmbeddingProvider, PromptVariant, TrendRule};
use timesaf::theory::Correlation;
use toml::{Table, Value};

use crate::registry::CsvDataset;
use crate::HarnessError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    LongTerm,
    FewShot,
    ZeroShot,
    Ablation,
    StageSweep,
    Theory,
}

/// Base model configuration the `[model]` table is merged over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-width defaults.
    #[default]
    Standard,
    /// Tiny model for smoke tests and desk-scale runs.
    Micro,
}

impl Preset {
    pub fn model(&self) -> ModelConfig {
        match self {
            Preset::Standard => ModelConfig::default(),
            Preset::Micro => ModelConfig::micro(),
        }
    }
}

/// Where a stage sweep puts its `S` fusion layers among `dp` layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Layers `1..=S`.
    Shallow,
    /// `round(s * dp / (S + 1))`, evenly spread over the interior.
    Middle,
    /// Layers `dp - S ..= dp - 1`, leaving the last layer to consume the final memory.
    Deep,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Shallow, Placement::Middle, Placement::Deep];

    pub fn as_str(&self) -> &'static str {
        match self {
            Placement::Shallow => "shallow",
            Placement::Middle => "middle",
            Placement::Deep => "deep",
        }
    }

    /// Fusion layers for `stages` stages in a `depth`-layer backbone. With
    /// `stages == depth` every preset fuses after every layer.
    pub fn fusion_layers(&self, depth: usize, stages: usize) -> Result<Vec<usize>, String> {
        if stages == 0 || stages > depth || !depth.is_multiple_of(stages) {
            return Err(format!("{stages} stages do not divide depth {depth} evenly"));
        }
        if stages == depth {
            return Ok((1..=depth).collect());
        }
        Ok((1..=stages)
            .map(|s| match self {
                Placement::Shallow => s,
                Placement::Middle => (2 * s * depth + stages + 1) / (2 * (stages + 1)),
                Placement::Deep => depth - stages - 1 + s,
            })
            .collect())
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Placement::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown placement {s:?}"))
    }
}

/// Prompt template settings. Frequency and domain default to the dataset's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    pub variant: PromptVariant,
    pub frequency: Option<String>,
    pub domain: Option<String>,
    pub precision: usize,
    pub trend: TrendRule,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            variant: PromptVariant::Full,
            frequency: None,
            domain: None,
            precision: 3,
            trend: TrendRule::LastMinusFirst,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Deterministic hash embedder with the model's `d_llm` width.
    #[default]
    Stub,
    /// Precomputed embeddings keyed by prompt hash.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub kind: EmbeddingKind,
    /// Stub seed.
    pub seed: u64,
    /// Embedding file, required for `file`.
    pub path: Option<PathBuf>,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Stub,
            seed: 2024,
            path: None,
        }
    }
}

impl EmbeddingSettings {
    pub fn provider(&self, dim: usize) -> Result<EmbeddingProvider, HarnessError> {
        Ok(match (self.kind, &self.path) {
            (EmbeddingKind::Stub, _) => EmbeddingProvider::stub(self.seed, dim),
            (EmbeddingKind::File, Some(path)) => EmbeddingProvider::from_file(path)?,
            (EmbeddingKind::File, None) => {
                return Err(HarnessError::Config("file embeddings need embeddings.path".into()))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySettings {
    pub depth: usize,
    pub stages: Vec<usize>,
    pub lambda: f64,
    pub sigma: f64,
    pub correlations: Vec<Correlation>,
    pub trials: usize,
    pub seed: u64,
    /// Gate logits for the attenuation table.
    pub gates: Vec<f64>,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            depth: 6,
            stages: vec![2],
            lambda: 1.0,
            sigma: 1.0,
            correlations: vec![
                Correlation::Iid,
                Correlation::Uniform { rho: 0.5 },
                Correlation::FullyCorrelated,
            ],
            trials: 1_000_000,
            seed: 2024,
            gates: vec![-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub task: Task,
    pub dataset: String,
    /// Zero-shot source dataset; `dataset` when unset.
    pub source: Option<String>,
    /// Zero-shot target dataset.
    pub target: Option<String>,
    /// Pretrained source checkpoint for zero-shot; trained in-run when unset.
    pub checkpoint: Option<PathBuf>,
    pub horizons: Vec<usize>,
    pub preset: Preset,
    /// Overrides merged over the preset's model configuration. `n_vars`
    /// and `horizon` are always taken from the dataset and horizon list.
    pub model: Table,
    pub train: TrainConfig,
    pub prompts: PromptSettings,
    pub embeddings: EmbeddingSettings,
    /// Z-score channels with train-split statistics before windowing.
    pub zscore: bool,
    pub few_shot_fraction: f64,
    pub variants: Vec<Variant>,
    pub stages: Vec<usize>,
    pub placements: Vec<Placement>,
    pub theory: TheorySettings,
    /// Extra CSV datasets added to the registry.
    pub datasets: Vec<CsvDataset>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            task: Task::LongTerm,
            dataset: "synth-h1".into(),
            source: None,
            target: None,
            checkpoint: None,
            horizons: vec![96, 192, 336, 720],
            preset: Preset::Standard,
            model: Table::new(),
            train: TrainConfig::default(),
            prompts: PromptSettings::default(),
            embeddings: EmbeddingSettings::default(),
            zscore: true,
            few_shot_fraction: 0.1,
            variants: Variant::ABLATION.to_vec(),
            stages: vec![1, 2, 4],
            placements: Placement::ALL.to_vec(),
            theory: TheorySettings::default(),
            datasets: Vec::new(),
            output_dir: None,
        }
    }
}

impl ExperimentSpec {
    /// Loads `path` (or defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, HarnessError> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)?.parse::<Table>()?,
            None => Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, value.clone())?;
        }
        let spec: Self = Value::Table(table).try_into()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(HarnessError::Config(
                "horizons must be a nonempty list of positive lengths".into(),
            ));
        }
        if !(self.few_shot_fraction > 0.0 && self.few_shot_fraction <= 1.0) {
            return Err(HarnessError::Config(format!(
                "few-shot fraction {} outside (0, 1]",
                self.few_shot_fraction
            )));
        }
        Ok(())
    }

    /// Preset merged with the `[model]` overrides, sized for one dataset and horizon.
    pub fn model_config(&self, n_vars: usize, horizon: usize) -> Result<ModelConfig, HarnessError> {
        let mut base = Table::try_from(self.preset.model())?;
        merge(&mut base, &self.model);
        let mut cfg: ModelConfig = Value::Table(base).try_into()?;
        cfg.n_vars = n_vars;
        cfg.horizon = horizon;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes")
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Splits `key=value` and parses the value with [`parse_value`].
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), parse_value(v.trim())))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), HarnessError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts
        .pop()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| HarnessError::Config(format!("empty key {key:?}")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("{key}: {part} is not a table")))?;
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placements_for_depth_four() {
        let lists = |s| Placement::ALL.map(|p| p.fusion_layers(4, s).unwrap());
        assert_eq!(lists(1), [vec![1], vec![2], vec![3]]);
        assert_eq!(lists(2), [vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(lists(4), [vec![1, 2, 3, 4], vec![1, 2, 3, 4], vec![1, 2, 3, 4]]);
        assert!(Placement::Middle.fusion_layers(2, 4).is_err());
        assert!(Placement::Middle.fusion_layers(6, 4).is_err());
    }

    #[test]
    fn placements_stay_valid() {
        for depth in 1..=12 {
            for stages in (1..depth).filter(|s| depth % s == 0) {
                for p in Placement::ALL {
                    let k = p.fusion_layers(depth, stages).unwrap();
                    assert_eq!(k.len(), stages);
                    assert!(k.windows(2).all(|w| w[0] < w[1]), "{p:?} {depth} {stages} {k:?}");
                    assert!(k[0] >= 1 && *k.last().unwrap() < depth, "{p:?} {depth} {stages} {k:?}");
                }
            }
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let sets: Vec<_> = [
            "preset=micro",
            "model.depth=4",
            "train.lr=0.01",
            "horizons=[4, 8]",
            "dataset=sine",
            "embeddings.seed=7",
        ]
        .iter()
        .map(|s| parse_assignment(s).unwrap())
        .collect();
        let spec = ExperimentSpec::load(None, &sets).unwrap();
        assert_eq!(spec.horizons, vec![4, 8]);
        assert_eq!(spec.train.lr, 0.01);
        assert_eq!(spec.dataset, "sine");
        assert_eq!(spec.embeddings.seed, 7);
        let cfg = spec.model_config(3, 8).unwrap();
        assert_eq!((cfg.depth, cfg.d_model, cfg.n_vars, cfg.horizon), (4, 8, 3, 8));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentSpec::load(None, &[parse_assignment("trian.lr=1").unwrap()]).is_err());
        let spec = ExperimentSpec::load(None, &[parse_assignment("model.dept=1").unwrap()]).unwrap();
        assert!(spec.model_config(7, 96).is_err());
    }

    #[test]
    fn spec_roundtrips_through_toml() {
        let spec = ExperimentSpec {
            model: [("depth".to_string(), Value::Integer(2))].into_iter().collect(),
            ..Default::default()
        };
        let back = ExperimentSpec::load(None, &[]).unwrap();
        assert_eq!(back, ExperimentSpec::default());
        let text = spec.to_toml();
        let parsed: ExperimentSpec = toml::from_str(&text).unwrap();
        assert_eq!(parsed, spec);
    }
}

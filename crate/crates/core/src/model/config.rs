use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockConfig;
use crate::numerics::Precision;
use crate::preprocess::PatchConfig;

use super::ModelError;

/// Architectural switch used by the ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No fusion and no refinement; both backbones stay unimodal.
    NoTrunk,
    /// The fusion block reads the time-branch hidden state in place of
    /// learnable queries.
    NoQuery,
    /// Refinement residuals are injected at full strength.
    NoGate,
    /// A fresh memory is fused from the previous layer and injected at every layer.
    SyncRefine,
    /// The last memory feeds a small decoder that replaces the temporal head.
    TrunkDecoder,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoTrunk,
        Variant::NoQuery,
        Variant::NoGate,
        Variant::SyncRefine,
        Variant::TrunkDecoder,
    ];

    /// The five variants of the default ablation.
    pub const ABLATION: [Variant; 5] = [
        Variant::Full,
        Variant::NoTrunk,
        Variant::NoQuery,
        Variant::NoGate,
        Variant::SyncRefine,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTrunk => "no_trunk",
            Variant::NoQuery => "no_query",
            Variant::NoGate => "no_gate",
            Variant::SyncRefine => "sync_refine",
            Variant::TrunkDecoder => "trunk_decoder",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone depth `dp`.
    pub depth: usize,
    /// Fusion stage count `S`.
    pub stages: usize,
    /// Explicit fusion layers `kappa`, 1-based; derived from `depth / stages` when absent.
    pub fusion_layers: Option<Vec<usize>>,
    /// Explicit refinement layers; every layer after the first fusion when absent.
    pub refine_layers: Option<Vec<usize>>,
    pub d_model: usize,
    pub d_fusion: usize,
    pub query_slots: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub d_llm: usize,
    pub patch: PatchConfig,
    pub n_vars: usize,
    pub horizon: usize,
    pub variant: Variant,
    pub seed: u64,
    pub dropout: f64,
    pub pre_norm: bool,
    pub ln_eps: f64,
    pub revin_eps: f64,
    pub revin_affine: bool,
    pub gate_init: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            stages: 2,
            fusion_layers: None,
            refine_layers: None,
            d_model: 64,
            d_fusion: 64,
            query_slots: 4,
            heads: 4,
            ffn_mult: 4,
            d_llm: crate::prompts::DEFAULT_LLM_DIM,
            patch: PatchConfig::default(),
            n_vars: 7,
            horizon: 96,
            variant: Variant::Full,
            seed: 2024,
            dropout: 0.0,
            pre_norm: true,
            ln_eps: 1e-5,
            revin_eps: 1e-5,
            revin_affine: true,
            gate_init: 0.0,
            precision: Precision::F64,
        }
    }
}

/// Resolved layer plan: where memories are fused and which layers refine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    /// Layer after which stage `s` (1-based position) fuses. Layer `0`
    /// means "from the embedded inputs", used only by synchronous refinement.
    pub fusion_after: Vec<usize>,
    pub refine: BTreeSet<usize>,
}

impl Schedule {
    pub fn num_stages(&self) -> usize {
        self.fusion_after.len()
    }
}

impl ModelConfig {
    /// Gradient-check sized configuration.
    pub fn micro() -> Self {
        Self {
            depth: 2,
            stages: 1,
            d_model: 8,
            d_fusion: 8,
            query_slots: 2,
            heads: 2,
            ffn_mult: 2,
            d_llm: 16,
            patch: PatchConfig {
                lookback: 16,
                patch_len: 4,
                stride: 4,
            },
            n_vars: 2,
            horizon: 4,
            ..Self::default()
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            d_fusion: self.d_fusion,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            pre_norm: self.pre_norm,
            ln_eps: self.ln_eps,
            dropout: self.dropout,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.patch.num_patches()
    }

    /// Fusion layers for `stages` evenly spaced stages over `depth` layers:
    /// `s * L_S` for every stage but the last, which fires at `depth - 1`
    /// so its memory is consumed. When that would not be strictly
    /// increasing (`stages == depth`), the last stage fires at `depth`.
    pub fn auto_fusion_layers(depth: usize, stages: usize) -> Result<Vec<usize>, ModelError> {
        if stages == 0 {
            return Ok(Vec::new());
        }
        if stages > depth || !depth.is_multiple_of(stages) {
            return Err(ModelError::Config(format!(
                "depth {depth} is not a multiple of {stages} stages"
            )));
        }
        let interval = depth / stages;
        let mut kappa: Vec<usize> = (1..stages).map(|s| s * interval).collect();
        let prev = kappa.last().copied().unwrap_or(0);
        kappa.push((depth - 1).max(prev + 1));
        Ok(kappa)
    }

    /// Validates every field and resolves the layer plan.
    pub fn schedule(&self) -> Result<Schedule, ModelError> {
        let cfg_err = |m: String| Err(ModelError::Config(m));
        if self.depth == 0 {
            return cfg_err("depth must be at least 1".into());
        }
        if self.n_vars == 0 || self.horizon == 0 || self.d_llm == 0 || self.query_slots == 0 {
            return cfg_err("n_vars, horizon, d_llm and query_slots must be positive".into());
        }
        self.patch.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        self.block_config().validate().map_err(|e| ModelError::Config(e.to_string()))?;
        if self.variant == Variant::NoQuery && self.d_fusion != self.d_model {
            return cfg_err(format!(
                "no_query feeds time states of width {} as queries of width {}",
                self.d_model, self.d_fusion
            ));
        }
        let all: BTreeSet<usize> = (1..=self.depth).collect();
        match self.variant {
            Variant::NoTrunk => {
                return Ok(Schedule {
                    fusion_after: Vec::new(),
                    refine: BTreeSet::new(),
                })
            }
            Variant::SyncRefine => {
                return Ok(Schedule {
                    fusion_after: (0..self.depth).collect(),
                    refine: all,
                })
            }
            _ => {}
        }
        if self.stages == 0 {
            return cfg_err(format!("variant {} needs at least one fusion stage", self.variant));
        }
        let kappa = match &self.fusion_layers {
            Some(k) => {
                if k.len() != self.stages {
                    return cfg_err(format!("{} fusion layers for {} stages", k.len(), self.stages));
                }
                if k.windows(2).any(|w| w[0] >= w[1]) {
                    return cfg_err(format!("fusion layers {k:?} must be strictly increasing"));
                }
                if k.iter().any(|&l| l == 0 || l > self.depth) {
                    return cfg_err(format!("fusion layers {k:?} outside 1..={}", self.depth));
                }
                k.clone()
            }
            None => Self::auto_fusion_layers(self.depth, self.stages)?,
        };
        let refine: BTreeSet<usize> = match &self.refine_layers {
            Some(r) => {
                if r.iter().any(|&l| l == 0 || l > self.depth) {
                    return cfg_err(format!("refine layers {r:?} outside 1..={}", self.depth));
                }
                r.iter().copied().collect()
            }
            None => (kappa[0] + 1..=self.depth).collect(),
        };
        Ok(Schedule {
            fusion_after: kappa,
            refine,
        })
    }
}

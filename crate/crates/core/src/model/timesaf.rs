use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    fusion_block, init_fusion, init_refine_extras, init_unimodal, refine_block, unimodal_block, BlockConfig,
    FusionMemory, Gate, Tracer, INIT_STD,
};
use crate::numerics::{AdamConfig, Checkpoint, ParameterStore, Params, Tensor, Var};
use crate::preprocess::{embed_patches, make_patches, Revin, RevinAffine, RevinState};
use crate::prompts::adapt_semantics;

use super::config::{ModelConfig, Schedule, Variant};
use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Time,
    Text,
}

impl Branch {
    fn prefix(&self) -> &'static str {
        match self {
            Branch::Time => "time",
            Branch::Text => "text",
        }
    }
}

/// One block invocation of a forward pass, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WiringEvent {
    Unimodal {
        branch: Branch,
        layer: usize,
    },
    Refine {
        branch: Branch,
        layer: usize,
        stage: usize,
    },
    /// `after_layer == 0` fuses the embedded inputs.
    Fusion {
        stage: usize,
        after_layer: usize,
    },
    Decoder {
        stage: usize,
    },
    Head,
}

/// Hidden states exported for inspection.
#[derive(Clone, Debug)]
pub struct Features {
    /// Final temporal states `[(B*N), N_p, D]`.
    pub time: Rc<Tensor>,
    /// Final textual states `[(B*N), 1, D]`.
    pub text: Rc<Tensor>,
    /// Every fusion memory in creation order.
    pub memories: Vec<Rc<Tensor>>,
}

pub struct ForwardOutput<'t> {
    /// `[B, H, N]` on the original value scale.
    pub forecast: Var<'t>,
    pub revin: RevinState,
    pub wiring: Vec<WiringEvent>,
    pub features: Features,
}

impl ForwardOutput<'_> {
    pub fn fusion_calls(&self) -> usize {
        self.wiring
            .iter()
            .filter(|e| matches!(e, WiringEvent::Fusion { .. }))
            .count()
    }
}

/// The hierarchical asynchronous fusion forecaster.
#[derive(Clone, Debug)]
pub struct TimeSaf {
    cfg: ModelConfig,
    schedule: Schedule,
    store: ParameterStore,
}

fn layer_prefix(branch: Branch, layer: usize) -> String {
    format!("{}.layer{layer}", branch.prefix())
}

fn stage_prefix(stage: usize) -> String {
    format!("fusion.stage{stage}")
}

fn gate_name(layer: usize) -> String {
    format!("gate.layer{layer}")
}

impl TimeSaf {
    /// Validates `cfg` and draws every parameter from a generator seeded with `cfg.seed`.
    pub fn new(cfg: ModelConfig, hyper: AdamConfig) -> Result<Self, ModelError> {
        let schedule = cfg.schedule()?;
        let mut store = ParameterStore::new(hyper);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bc = cfg.block_config();
        let (d, df, n, np) = (cfg.d_model, cfg.d_fusion, cfg.n_vars, cfg.num_patches());

        if cfg.revin_affine {
            store.insert("revin.gain", Tensor::ones(&[n]))?;
            store.insert("revin.bias", Tensor::zeros(&[n]))?;
        }
        store.insert_trunc_normal("time.embed.w", &[cfg.patch.patch_len, d], INIT_STD, &mut rng)?;
        store.insert("time.embed.b", Tensor::zeros(&[d]))?;
        store.insert_trunc_normal("time.pos", &[np, d], INIT_STD, &mut rng)?;
        store.insert_trunc_normal("text.adapter.w", &[cfg.d_llm, d], INIT_STD, &mut rng)?;
        store.insert("text.adapter.b", Tensor::zeros(&[d]))?;
        store.insert_trunc_normal("text.pos", &[n, d], INIT_STD, &mut rng)?;

        for layer in 1..=cfg.depth {
            for branch in [Branch::Time, Branch::Text] {
                let prefix = layer_prefix(branch, layer);
                init_unimodal(&mut store, &prefix, &bc, d, &mut rng)?;
                if schedule.refine.contains(&layer) {
                    init_refine_extras(&mut store, &prefix, &bc, &mut rng)?;
                }
            }
            if schedule.refine.contains(&layer) && cfg.variant != Variant::NoGate {
                store.insert(gate_name(layer), Tensor::scalar(cfg.gate_init))?;
            }
        }
        for stage in 1..=schedule.num_stages() {
            let prefix = stage_prefix(stage);
            if cfg.variant != Variant::NoQuery {
                store.insert_trunc_normal(format!("{prefix}.queries"), &[cfg.query_slots, df], INIT_STD, &mut rng)?;
            }
            init_fusion(&mut store, &prefix, &bc, &mut rng)?;
        }
        if cfg.variant == Variant::TrunkDecoder {
            let dec = BlockConfig { d_model: df, ..bc };
            init_unimodal(&mut store, "decoder.block", &dec, df, &mut rng)?;
            store.insert_trunc_normal(
                "decoder.out.w",
                &[cfg.query_slots * df, cfg.horizon],
                INIT_STD,
                &mut rng,
            )?;
            store.insert("decoder.out.b", Tensor::zeros(&[cfg.horizon]))?;
        } else {
            store.insert_trunc_normal("head.w", &[np * d, cfg.horizon], INIT_STD, &mut rng)?;
            store.insert("head.b", Tensor::zeros(&[cfg.horizon]))?;
        }
        Ok(Self { cfg, schedule, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &ParameterStore) -> Result<usize, ModelError> {
        let names: Vec<String> = self.store.names().map(str::to_string).collect();
        let mut copied = 0;
        for name in names {
            if let Some(src) = other.get(&name) {
                if src.shape() == self.store.get(&name).map(Tensor::shape).unwrap_or(&[]) {
                    self.store.set(&name, src.clone())?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    pub fn config_text(&self) -> String {
        toml::to_string(&self.cfg).expect("model config serializes")
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, &self.config_text(), self.cfg.seed)
    }

    /// Rebuilds a model from a checkpoint written by [`checkpoint`](Self::checkpoint).
    pub fn from_checkpoint(ckpt: &Checkpoint, hyper: AdamConfig) -> Result<Self, ModelError> {
        let cfg: ModelConfig =
            toml::from_str(&ckpt.config_text).map_err(|e| ModelError::Config(format!("checkpoint config: {e}")))?;
        let mut model = Self::new(cfg, hyper)?;
        ckpt.load_into(&mut model.store)?;
        Ok(model)
    }

    fn gate<'a, 't>(&self, p: &'a Params<'t>, layer: usize) -> Result<Gate<'a, 't>, ModelError> {
        Ok(if self.cfg.variant == Variant::NoGate {
            Gate::Fixed(1.0)
        } else {
            Gate::Learned(p.get(&gate_name(layer))?)
        })
    }

    fn fuse<'t>(
        &self,
        p: &Params<'t>,
        stage: usize,
        h_time: &Var<'t>,
        h_text: &Var<'t>,
        tracer: &Tracer,
    ) -> Result<FusionMemory<'t>, ModelError> {
        let prefix = stage_prefix(stage);
        let rows = h_time.shape()[0];
        let queries = if self.cfg.variant == Variant::NoQuery {
            h_time.clone()
        } else {
            let (pf, df) = (self.cfg.query_slots, self.cfg.d_fusion);
            p.get(&format!("{prefix}.queries"))?
                .reshape(&[1, pf, df])?
                .broadcast_to(&[rows, pf, df])?
        };
        Ok(fusion_block(
            p,
            &prefix,
            &self.cfg.block_config(),
            &queries,
            h_time,
            h_text,
            stage,
            tracer,
        )?)
    }

    /// Forecasts from raw input `x [B, L, N]` and prompt
    /// embeddings `e`, either `[B, D_llm, N]` or `[D_llm, N]`.
    pub fn forward<'t>(
        &self,
        p: &Params<'t>,
        x: &Var<'t>,
        e: &Var<'t>,
        tracer: &Tracer,
    ) -> Result<ForwardOutput<'t>, ModelError> {
        let cfg = &self.cfg;
        let &[b, l, n] = x.shape() else {
            return Err(ModelError::Shape(format!(
                "input must be [B, L, N], got {:?}",
                x.shape()
            )));
        };
        if l != cfg.patch.lookback || n != cfg.n_vars {
            return Err(ModelError::Shape(format!(
                "input [{b}, {l}, {n}] does not match lookback {} and {} variables",
                cfg.patch.lookback, cfg.n_vars
            )));
        }
        let bc = cfg.block_config();
        let mut revin = Revin::new(cfg.revin_eps);
        let affine = if cfg.revin_affine {
            Some((p.get("revin.gain")?.clone(), p.get("revin.bias")?.clone()))
        } else {
            None
        };
        let affine_ref = affine.as_ref().map(|(gain, bias)| RevinAffine { gain, bias });
        let x_norm = revin.normalize(x, affine_ref)?;

        let patches = make_patches(&x_norm, &cfg.patch)?;
        let mut h_time = embed_patches(
            &patches,
            p.get("time.embed.w")?,
            p.get("time.embed.b")?,
            p.get("time.pos")?,
        )?;
        let mut h_text = adapt_semantics(
            e,
            p.get("text.adapter.w")?,
            p.get("text.adapter.b")?,
            p.get("text.pos")?,
            b,
        )?;

        let sync = cfg.variant == Variant::SyncRefine;
        let mut wiring = Vec::new();
        let mut memories = Vec::new();
        let mut memory: Option<FusionMemory<'t>> = None;
        let mut next_stage = 0;

        for layer in 1..=cfg.depth {
            if sync {
                memory = Some(self.fuse(p, layer, &h_time, &h_text, tracer)?);
                wiring.push(WiringEvent::Fusion {
                    stage: layer,
                    after_layer: layer - 1,
                });
                memories.push(memory.as_ref().unwrap().value.value_rc());
            }
            let refine = self.schedule.refine.contains(&layer) && memory.is_some();
            let (t_prefix, x_prefix) = (layer_prefix(Branch::Time, layer), layer_prefix(Branch::Text, layer));
            if refine {
                let mem = memory.as_ref();
                let gate = self.gate(p, layer)?;
                let stage = mem.unwrap().stage;
                h_time = refine_block(p, &t_prefix, &bc, &h_time, mem, gate, tracer)?;
                h_text = refine_block(p, &x_prefix, &bc, &h_text, mem, gate, tracer)?;
                for branch in [Branch::Time, Branch::Text] {
                    wiring.push(WiringEvent::Refine { branch, layer, stage });
                }
            } else {
                h_time = unimodal_block(p, &t_prefix, &bc, &h_time, tracer)?;
                h_text = unimodal_block(p, &x_prefix, &bc, &h_text, tracer)?;
                for branch in [Branch::Time, Branch::Text] {
                    wiring.push(WiringEvent::Unimodal { branch, layer });
                }
            }
            if !sync && self.schedule.fusion_after.get(next_stage) == Some(&layer) {
                next_stage += 1;
                // replaces, never merges with, the previous stage's memory
                memory = Some(self.fuse(p, next_stage, &h_time, &h_text, tracer)?);
                wiring.push(WiringEvent::Fusion {
                    stage: next_stage,
                    after_layer: layer,
                });
                memories.push(memory.as_ref().unwrap().value.value_rc());
            }
        }

        let rows = b * n;
        let y = if cfg.variant == Variant::TrunkDecoder {
            let mem = memory.ok_or_else(|| ModelError::Config("trunk decoder without a fusion memory".into()))?;
            let dec = BlockConfig {
                d_model: cfg.d_fusion,
                ..bc
            };
            let z = unimodal_block(p, "decoder.block", &dec, &mem.value, tracer)?;
            wiring.push(WiringEvent::Decoder { stage: mem.stage });
            let flat = z.reshape(&[rows, cfg.query_slots * cfg.d_fusion])?;
            flat.matmul(p.get("decoder.out.w")?)?.add(p.get("decoder.out.b")?)?
        } else {
            wiring.push(WiringEvent::Head);
            let flat = h_time.reshape(&[rows, cfg.num_patches() * cfg.d_model])?;
            flat.matmul(p.get("head.w")?)?.add(p.get("head.b")?)?
        };
        let y = y.reshape(&[b, n, cfg.horizon])?.permute(&[0, 2, 1])?;
        let forecast = revin.denormalize(&y, affine_ref)?;
        Ok(ForwardOutput {
            forecast,
            revin: revin.state().cloned().expect("normalize ran"),
            wiring,
            features: Features {
                time: h_time.value_rc(),
                text: h_text.value_rc(),
                memories,
            },
        })
    }
}

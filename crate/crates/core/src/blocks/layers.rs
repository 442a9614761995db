use rand::Rng;

use crate::numerics::{sigmoid, ParameterStore, Params, Var};

use super::attention::{ffn, init_attention, init_ffn, init_linear, linear, multihead_attn, residual, AttentionConfig};
use super::{BlockConfig, BlockError, Tracer};

/// Injection strength of a refinement residual.
#[derive(Clone, Copy)]
pub enum Gate<'a, 't> {
    /// Scalar parameter `g`; the residual is scaled by `sigmoid(g)`.
    Learned(&'a Var<'t>),
    Fixed(f64),
}

impl Gate<'_, '_> {
    pub fn strength(&self) -> f64 {
        match self {
            Gate::Learned(g) => sigmoid(g.value().item()),
            Gate::Fixed(v) => *v,
        }
    }
}

/// Output of a fusion block for one stage.
#[derive(Clone)]
pub struct FusionMemory<'t> {
    /// `[(B*N), P_f, D_f]`
    pub value: Var<'t>,
    pub stage: usize,
}

fn self_attn_cfg(cfg: &BlockConfig, d: usize) -> AttentionConfig {
    AttentionConfig {
        pre_norm: cfg.pre_norm,
        ln_eps: cfg.ln_eps,
        dropout: cfg.dropout,
        ..AttentionConfig::self_attn(d, cfg.heads)
    }
}

fn cross_cfg(cfg: &BlockConfig, d_query: usize, d_kv: usize, d_inner: usize, d_out: usize) -> AttentionConfig {
    AttentionConfig {
        pre_norm: cfg.pre_norm,
        ln_eps: cfg.ln_eps,
        dropout: cfg.dropout,
        ..AttentionConfig::cross(d_query, d_kv, d_inner, d_out, cfg.heads)
    }
}

/// Registers `{prefix}.self_attn.*` and `{prefix}.ffn.*` at width `d`.
pub fn init_unimodal(
    store: &mut ParameterStore,
    prefix: &str,
    cfg: &BlockConfig,
    d: usize,
    rng: &mut impl Rng,
) -> Result<(), BlockError> {
    init_attention(store, &format!("{prefix}.self_attn"), &self_attn_cfg(cfg, d), rng)?;
    init_ffn(store, &format!("{prefix}.ffn"), d, cfg.ffn_mult, cfg.pre_norm, rng)
}

fn self_update<'t>(
    p: &Params<'t>,
    prefix: &str,
    cfg: &BlockConfig,
    h: &Var<'t>,
    tracer: &Tracer,
) -> Result<Var<'t>, BlockError> {
    let d = h.shape()[h.shape().len() - 1];
    let sub = format!("{prefix}.self_attn");
    let (sa, map) = multihead_attn(p, &sub, &self_attn_cfg(cfg, d), h, None)?;
    tracer.record(|| format!("{prefix}_self"), map);
    residual(p, &sub, h, &sa, cfg.pre_norm, cfg.ln_eps)
}

fn ffn_update<'t>(p: &Params<'t>, prefix: &str, cfg: &BlockConfig, x: &Var<'t>) -> Result<Var<'t>, BlockError> {
    let sub = format!("{prefix}.ffn");
    let f = ffn(p, &sub, x, cfg.pre_norm, cfg.ln_eps, cfg.dropout)?;
    residual(p, &sub, x, &f, cfg.pre_norm, cfg.ln_eps)
}

/// `U = H + SelfAttn(H)`, `out = U + FFN(U)`.
pub fn unimodal_block<'t>(
    p: &Params<'t>,
    prefix: &str,
    cfg: &BlockConfig,
    h: &Var<'t>,
    tracer: &Tracer,
) -> Result<Var<'t>, BlockError> {
    let u = self_update(p, prefix, cfg, h, tracer)?;
    ffn_update(p, prefix, cfg, &u)
}

/// Registers `{prefix}.{query_attn,time_attn,text_attn,ffn}.*`; queries have
/// width `cfg.d_fusion`, both branches width `cfg.d_model`.
pub fn init_fusion(
    store: &mut ParameterStore,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut impl Rng,
) -> Result<(), BlockError> {
    let (df, d) = (cfg.d_fusion, cfg.d_model);
    init_attention(store, &format!("{prefix}.query_attn"), &self_attn_cfg(cfg, df), rng)?;
    init_attention(
        store,
        &format!("{prefix}.time_attn"),
        &cross_cfg(cfg, df, d, df, df),
        rng,
    )?;
    init_attention(
        store,
        &format!("{prefix}.text_attn"),
        &cross_cfg(cfg, df, d, df, df),
        rng,
    )?;
    init_ffn(store, &format!("{prefix}.ffn"), df, cfg.ffn_mult, cfg.pre_norm, rng)
}

/// Query self-attention, then cross-attention to the time branch, then to
/// the text branch, each residual, closed by a residual FFN.
#[allow(clippy::too_many_arguments)]
pub fn fusion_block<'t>(
    p: &Params<'t>,
    prefix: &str,
    cfg: &BlockConfig,
    queries: &Var<'t>,
    h_time: &Var<'t>,
    h_text: &Var<'t>,
    stage: usize,
    tracer: &Tracer,
) -> Result<FusionMemory<'t>, BlockError> {
    if h_time.shape()[0] != h_text.shape()[0] || queries.shape()[0] != h_time.shape()[0] {
        return Err(BlockError::Alignment {
            query_rows: queries.shape()[0],
            memory_rows: if queries.shape()[0] != h_time.shape()[0] {
                h_time.shape()[0]
            } else {
                h_text.shape()[0]
            },
        });
    }
    let df = queries.shape()[queries.shape().len() - 1];
    let d = h_time.shape()[h_time.shape().len() - 1];
    let tag = format!("stage{stage}");

    let sub = format!("{prefix}.query_attn");
    let (sa, map) = multihead_attn(p, &sub, &self_attn_cfg(cfg, df), queries, None)?;
    tracer.record(|| format!("{tag}_query_self"), map);
    let q = residual(p, &sub, queries, &sa, cfg.pre_norm, cfg.ln_eps)?;

    let sub = format!("{prefix}.time_attn");
    let (ct, map) = multihead_attn(p, &sub, &cross_cfg(cfg, df, d, df, df), &q, Some(h_time))?;
    tracer.record(|| format!("{tag}_query_to_time"), map);
    let q = residual(p, &sub, &q, &ct, cfg.pre_norm, cfg.ln_eps)?;

    let sub = format!("{prefix}.text_attn");
    let (cx, map) = multihead_attn(p, &sub, &cross_cfg(cfg, df, d, df, df), &q, Some(h_text))?;
    tracer.record(|| format!("{tag}_query_to_text"), map);
    let q = residual(p, &sub, &q, &cx, cfg.pre_norm, cfg.ln_eps)?;

    let value = ffn_update(p, prefix, cfg, &q)?;
    Ok(FusionMemory { value, stage })
}

/// Registers the refinement-only parameters `{prefix}.cross_attn.*` and
/// `{prefix}.adapter.*`; the self-attention and FFN are shared with
/// [`init_unimodal`] under the same prefix.
pub fn init_refine_extras(
    store: &mut ParameterStore,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut impl Rng,
) -> Result<(), BlockError> {
    let (df, d) = (cfg.d_fusion, cfg.d_model);
    init_attention(
        store,
        &format!("{prefix}.cross_attn"),
        &cross_cfg(cfg, d, df, df, df),
        rng,
    )?;
    init_linear(store, &format!("{prefix}.adapter"), df, d, rng)
}

/// `U = H + SelfAttn(H)`, `Z = CrossAttn(U, F)`, `R = gate * (W_ad Z + b)`,
/// `H' = U + R`, `out = H' + FFN(H')`.
pub fn refine_block<'t>(
    p: &Params<'t>,
    prefix: &str,
    cfg: &BlockConfig,
    h: &Var<'t>,
    memory: Option<&FusionMemory<'t>>,
    gate: Gate<'_, 't>,
    tracer: &Tracer,
) -> Result<Var<'t>, BlockError> {
    let memory = memory.ok_or_else(|| BlockError::Contract(format!("{prefix}: refinement without a fusion memory")))?;
    let d = h.shape()[h.shape().len() - 1];
    let df = memory.value.shape()[memory.value.shape().len() - 1];
    let u = self_update(p, prefix, cfg, h, tracer)?;

    let sub = format!("{prefix}.cross_attn");
    let (z, map) = multihead_attn(p, &sub, &cross_cfg(cfg, d, df, df, df), &u, Some(&memory.value))?;
    tracer.record(|| format!("{prefix}_to_memory"), map);
    let adapted = linear(p, &format!("{prefix}.adapter"), &z)?;
    let r = match gate {
        Gate::Learned(g) => adapted.mul(&g.sigmoid()?)?,
        Gate::Fixed(v) => adapted.scale(v)?,
    };
    let refined = residual(p, &sub, &u, &r, cfg.pre_norm, cfg.ln_eps)?;
    ffn_update(p, prefix, cfg, &refined)
}

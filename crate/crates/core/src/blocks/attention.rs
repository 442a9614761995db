use std::rc::Rc;

use rand::Rng;

use crate::numerics::{ParameterStore, Params, Tensor, Var};

use super::{BlockError, INIT_STD};

/// Widths of one attention sublayer.
///
/// Queries of width `d_query` attend to keys/values of width `d_kv`; heads
/// split `d_inner` and the output projection maps back to `d_out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_query: usize,
    pub d_kv: usize,
    pub d_inner: usize,
    pub d_out: usize,
    pub heads: usize,
    pub pre_norm: bool,
    pub ln_eps: f64,
    pub dropout: f64,
    /// Keys and values come from the query input.
    pub self_attention: bool,
}

impl AttentionConfig {
    pub fn self_attn(d: usize, heads: usize) -> Self {
        Self {
            d_query: d,
            d_kv: d,
            d_inner: d,
            d_out: d,
            heads,
            pre_norm: true,
            ln_eps: 1e-5,
            dropout: 0.0,
            self_attention: true,
        }
    }

    pub fn cross(d_query: usize, d_kv: usize, d_inner: usize, d_out: usize, heads: usize) -> Self {
        Self {
            d_query,
            d_kv,
            d_inner,
            d_out,
            self_attention: false,
            ..Self::self_attn(d_query, heads)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_inner / self.heads
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        if self.heads == 0 || !self.d_inner.is_multiple_of(self.heads) {
            return Err(BlockError::Dim(format!(
                "attention width {} not divisible by {} heads",
                self.d_inner, self.heads
            )));
        }
        if self.self_attention && self.d_query != self.d_kv {
            return Err(BlockError::Dim(format!(
                "self-attention with query width {} and key width {}",
                self.d_query, self.d_kv
            )));
        }
        Ok(())
    }
}

pub(crate) fn init_layernorm(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<(), BlockError> {
    store.insert(format!("{prefix}.gain"), Tensor::ones(&[d]))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
    Ok(())
}

pub(crate) fn layernorm<'t>(p: &Params<'t>, prefix: &str, x: &Var<'t>, eps: f64) -> Result<Var<'t>, BlockError> {
    let gain = p.get(&format!("{prefix}.gain"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    Ok(x.layernorm(gain, bias, eps)?)
}

pub(crate) fn init_linear(
    store: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) -> Result<(), BlockError> {
    store.insert_trunc_normal(format!("{prefix}.w"), &[d_in, d_out], INIT_STD, rng)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
    Ok(())
}

pub(crate) fn linear<'t>(p: &Params<'t>, prefix: &str, x: &Var<'t>) -> Result<Var<'t>, BlockError> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(x.matmul(w)?.add(b)?)
}

/// Registers `{prefix}.{ln_q,ln_kv,q,k,v,o}.*`. `ln_kv` exists only for
/// cross-attention; post-norm mode replaces both with `ln_post`, applied
/// after the residual sum.
pub fn init_attention(
    store: &mut ParameterStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut impl Rng,
) -> Result<(), BlockError> {
    cfg.validate()?;
    if cfg.pre_norm {
        init_layernorm(store, &format!("{prefix}.ln_q"), cfg.d_query)?;
        if !cfg.self_attention {
            init_layernorm(store, &format!("{prefix}.ln_kv"), cfg.d_kv)?;
        }
    } else {
        init_layernorm(store, &format!("{prefix}.ln_post"), cfg.d_query)?;
    }
    init_linear(store, &format!("{prefix}.q"), cfg.d_query, cfg.d_inner, rng)?;
    init_linear(store, &format!("{prefix}.k"), cfg.d_kv, cfg.d_inner, rng)?;
    init_linear(store, &format!("{prefix}.v"), cfg.d_kv, cfg.d_inner, rng)?;
    init_linear(store, &format!("{prefix}.o"), cfg.d_inner, cfg.d_out, rng)?;
    Ok(())
}

/// `[b, t, h*dh] -> [b, h, t, dh]`
fn split_heads<'t>(x: &Var<'t>, heads: usize) -> Result<Var<'t>, BlockError> {
    let &[b, t, d] = x.shape() else {
        return Err(BlockError::Dim(format!("expected [b, t, d], got {:?}", x.shape())));
    };
    Ok(x.reshape(&[b, t, heads, d / heads])?.permute(&[0, 2, 1, 3])?)
}

/// Scaled dot-product multi-head attention. `kv = None` is self-attention.
///
/// Returns the projected output `[b, t_q, d_out]` and the attention weights
/// `[b, h, t_q, t_k]`.
pub fn multihead_attn<'t>(
    p: &Params<'t>,
    prefix: &str,
    cfg: &AttentionConfig,
    q: &Var<'t>,
    kv: Option<&Var<'t>>,
) -> Result<(Var<'t>, Rc<Tensor>), BlockError> {
    let check = |x: &Var<'t>, width: usize, role: &str| match x.shape() {
        &[_, _, d] if d == width => Ok(()),
        s => Err(BlockError::Dim(format!(
            "{prefix}: {role} shape {s:?}, expected width {width}"
        ))),
    };
    check(q, cfg.d_query, "query")?;
    if let Some(kv) = kv {
        check(kv, cfg.d_kv, "key/value")?;
        if kv.shape()[0] != q.shape()[0] {
            return Err(BlockError::Alignment {
                query_rows: q.shape()[0],
                memory_rows: kv.shape()[0],
            });
        }
    }
    let (qn, kvn) = if cfg.pre_norm {
        let qn = layernorm(p, &format!("{prefix}.ln_q"), q, cfg.ln_eps)?;
        let kvn = match kv {
            None => qn.clone(),
            Some(kv) if cfg.self_attention => layernorm(p, &format!("{prefix}.ln_q"), kv, cfg.ln_eps)?,
            Some(kv) => layernorm(p, &format!("{prefix}.ln_kv"), kv, cfg.ln_eps)?,
        };
        (qn, kvn)
    } else {
        (q.clone(), kv.unwrap_or(q).clone())
    };

    let h = cfg.heads;
    let qh = split_heads(&linear(p, &format!("{prefix}.q"), &qn)?, h)?;
    let kh = split_heads(&linear(p, &format!("{prefix}.k"), &kvn)?, h)?;
    let vh = split_heads(&linear(p, &format!("{prefix}.v"), &kvn)?, h)?;
    let scores = qh
        .matmul(&kh.transpose_last2()?)?
        .scale(1.0 / (cfg.head_dim() as f64).sqrt())?;
    let weights = scores.softmax_lastdim()?;
    let map = weights.value_rc();
    let ctx = weights.dropout(cfg.dropout)?.matmul(&vh)?;
    let &[b, _, tq, dh] = ctx.shape() else { unreachable!() };
    let ctx = ctx.permute(&[0, 2, 1, 3])?.reshape(&[b, tq, h * dh])?;
    let out = linear(p, &format!("{prefix}.o"), &ctx)?;
    Ok((out, map))
}

/// Registers `{prefix}.{ln|ln_post,fc1,fc2}.*` for a `d -> mult*d -> d` GELU network.
pub fn init_ffn(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    mult: usize,
    pre_norm: bool,
    rng: &mut impl Rng,
) -> Result<(), BlockError> {
    let ln = if pre_norm { "ln" } else { "ln_post" };
    init_layernorm(store, &format!("{prefix}.{ln}"), d)?;
    init_linear(store, &format!("{prefix}.fc1"), d, mult * d, rng)?;
    init_linear(store, &format!("{prefix}.fc2"), mult * d, d, rng)?;
    Ok(())
}

/// `x + delta`, followed by `{prefix}.ln_post` in post-norm mode.
pub(crate) fn residual<'t>(
    p: &Params<'t>,
    prefix: &str,
    x: &Var<'t>,
    delta: &Var<'t>,
    pre_norm: bool,
    ln_eps: f64,
) -> Result<Var<'t>, BlockError> {
    let sum = x.add(delta)?;
    if pre_norm {
        Ok(sum)
    } else {
        layernorm(p, &format!("{prefix}.ln_post"), &sum, ln_eps)
    }
}

pub fn ffn<'t>(
    p: &Params<'t>,
    prefix: &str,
    x: &Var<'t>,
    pre_norm: bool,
    ln_eps: f64,
    dropout: f64,
) -> Result<Var<'t>, BlockError> {
    let x = if pre_norm {
        layernorm(p, &format!("{prefix}.ln"), x, ln_eps)?
    } else {
        x.clone()
    };
    let hidden = linear(p, &format!("{prefix}.fc1"), &x)?.gelu()?;
    Ok(linear(p, &format!("{prefix}.fc2"), &hidden)?.dropout(dropout)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{AdamConfig, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(prefix: &str, cfg: &AttentionConfig) -> ParameterStore {
        let mut store = ParameterStore::new(AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_attention(&mut store, prefix, cfg, &mut rng).unwrap();
        store
    }

    fn eye(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    #[test]
    fn single_key_weights_are_one() {
        let cfg = AttentionConfig::cross(8, 6, 6, 8, 2);
        let store = store_with("x", &cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = tape.constant(Tensor::new(&[3, 5, 8], (0..120).map(|_| rng.random::<f64>()).collect()).unwrap());
        let kv = tape.constant(Tensor::new(&[3, 1, 6], (0..18).map(|_| rng.random::<f64>()).collect()).unwrap());
        let (out, map) = multihead_attn(&p, "x", &cfg, &q, Some(&kv)).unwrap();
        assert_eq!(out.shape(), &[3, 5, 8]);
        assert_eq!(map.shape(), &[3, 2, 5, 1]);
        assert!(map.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn uniform_logits_average_values() {
        let mut cfg = AttentionConfig::self_attn(3, 1);
        cfg.pre_norm = false;
        let mut store = store_with("a", &cfg);
        store.set("a.q.w", Tensor::zeros(&[3, 3])).unwrap();
        store.set("a.v.w", eye(3)).unwrap();
        store.set("a.o.w", eye(3)).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = Tensor::new(&[1, 3, 3], vec![1., 2., 3., 4., 5., 6., 0., -1., 9.]).unwrap();
        let (out, map) = multihead_attn(&p, "a", &cfg, &tape.constant(x.clone()), None).unwrap();
        // brute force: every query sees weight 1/3 on every token
        let mean: Vec<f64> = (0..3)
            .map(|k| (0..3).map(|t| x.at(&[0, t, k])).sum::<f64>() / 3.0)
            .collect();
        for t in 0..3 {
            for k in 0..3 {
                assert!((out.value().at(&[0, t, k]) - mean[k]).abs() < 1e-12);
                assert!((map.at(&[0, 0, t, k]) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_width_errors() {
        let cfg = AttentionConfig::self_attn(8, 4);
        let store = store_with("s", &cfg);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(Tensor::new(&[2, 6, 8], (0..96).map(|_| rng.random::<f64>() * 4.0).collect()).unwrap());
        let (_, map) = multihead_attn(&p, "s", &cfg, &x, None).unwrap();
        for row in map.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let bad = tape.constant(Tensor::zeros(&[2, 6, 7]));
        assert!(matches!(
            multihead_attn(&p, "s", &cfg, &bad, None),
            Err(BlockError::Dim(_))
        ));
        assert!(AttentionConfig::self_attn(10, 4).validate().is_err());
    }
}

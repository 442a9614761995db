//! Attention sublayers and the unimodal, fusion and refinement blocks.
//!
//! Parameters live in a [`ParameterStore`](crate::numerics::ParameterStore)
//! under dotted prefixes; every block is a pure function of its inputs and
//! the bound parameters.

mod attention;
mod layers;

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use attention::{ffn, init_attention, init_ffn, multihead_attn, AttentionConfig};
pub use layers::{
    fusion_block, init_fusion, init_refine_extras, init_unimodal, refine_block, unimodal_block, FusionMemory, Gate,
};

use crate::numerics::{NumericsError, Tensor};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum BlockError {
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("batch rows do not align: {query_rows} query rows vs {memory_rows} memory rows")]
    Alignment { query_rows: usize, memory_rows: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Widths and options shared by every block of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_fusion: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pre_norm: bool,
    pub ln_eps: f64,
    pub dropout: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_fusion: 64,
            heads: 4,
            ffn_mult: 4,
            pre_norm: true,
            ln_eps: 1e-5,
            dropout: 0.0,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<(), BlockError> {
        for (name, d) in [("model", self.d_model), ("fusion", self.d_fusion)] {
            if self.heads == 0 || d % self.heads != 0 {
                return Err(BlockError::Dim(format!(
                    "{name} width {d} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if self.ffn_mult == 0 {
            return Err(BlockError::Dim("FFN expansion must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(BlockError::Dim(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TracedMap {
    pub name: String,
    /// `[b, h, t_q, t_k]`
    pub weights: Rc<Tensor>,
}

/// Collects attention maps when enabled; otherwise drops them.
#[derive(Debug, Default)]
pub struct Tracer {
    enabled: bool,
    maps: RefCell<Vec<TracedMap>>,
}

impl Tracer {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            maps: RefCell::default(),
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&self, name: impl FnOnce() -> String, weights: Rc<Tensor>) {
        if self.enabled {
            self.maps.borrow_mut().push(TracedMap { name: name(), weights });
        }
    }

    pub fn maps(&self) -> Vec<TracedMap> {
        self.maps.borrow().clone()
    }

    pub fn take(&self) -> Vec<TracedMap> {
        std::mem::take(&mut *self.maps.borrow_mut())
    }
}

impl TracedMap {
    /// Head-averaged `[t_q, t_k]` matrix of batch row `row`.
    pub fn head_mean(&self, row: usize) -> Result<Tensor, BlockError> {
        let &[b, h, tq, tk] = self.weights.shape() else {
            return Err(BlockError::Dim(format!(
                "attention map shape {:?}",
                self.weights.shape()
            )));
        };
        if row >= b {
            return Err(BlockError::Dim(format!("row {row} out of {b}")));
        }
        let mut out = vec![0.0; tq * tk];
        for head in 0..h {
            let base = (row * h + head) * tq * tk;
            for (o, w) in out.iter_mut().zip(&self.weights.data()[base..base + tq * tk]) {
                *o += w / h as f64;
            }
        }
        Ok(Tensor::new(&[tq, tk], out)?)
    }

    /// Writes [`head_mean`](Self::head_mean) as `{dir}/{name}.csv`, one query per line.
    pub fn write_csv(&self, dir: &Path, row: usize) -> std::io::Result<std::path::PathBuf> {
        let m = self
            .head_mean(row)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
        let tk = m.shape()[1];
        let mut text = String::new();
        for line in m.data().chunks(tk) {
            let cells: Vec<String> = line.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(text, "{}", cells.join(",")).unwrap();
        }
        let path = dir.join(format!("{}.csv", self.name));
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

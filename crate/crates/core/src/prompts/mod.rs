//! Per-variable prompt text, frozen embeddings and the semantic adapter.

mod provider;
mod template;

pub use provider::{text_hash, Embedder, EmbeddingProvider, FileEmbeddings, StubEmbedder, TextHash};
pub use template::{render_prompt, PromptTemplateSpec, PromptVariant, TrendRule, INSTRUCTION_TEXT};

use crate::numerics::{NumericsError, Tensor, Var};
use crate::preprocess::WindowedDataset;

pub const DEFAULT_LLM_DIM: usize = 768;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("no embedding for prompt beginning {prefix:?}")]
    MissingEmbedding { prefix: String },
    #[error("embedding has length {found}, expected {expected}")]
    Dim { expected: usize, found: usize },
    #[error("embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub variable: usize,
    pub text: String,
    pub embedding: Vec<f64>,
}

/// Renders the prompt of every variable for the window starting at `start`.
pub fn render_window(ds: &WindowedDataset, start: usize, spec: &PromptTemplateSpec) -> Vec<String> {
    let (first, last) = ds.history_span(start);
    (0..ds.num_channels())
        .map(|c| render_prompt(ds.history(start, c), first, last, spec))
        .collect()
}

/// Embeds one prompt per variable.
pub fn prompt_records(texts: &[String], provider: &impl Embedder) -> Result<Vec<PromptRecord>, PromptError> {
    texts
        .iter()
        .enumerate()
        .map(|(variable, text)| {
            let embedding = provider.embed(text)?;
            if embedding.len() != provider.dim() {
                return Err(PromptError::Dim {
                    expected: provider.dim(),
                    found: embedding.len(),
                });
            }
            Ok(PromptRecord {
                variable,
                text: text.clone(),
                embedding,
            })
        })
        .collect()
}

/// Stacks record embeddings as the columns of a `[D_llm, N]` matrix.
pub fn embed_prompts(records: &[PromptRecord], provider: &impl Embedder) -> Result<Tensor, PromptError> {
    let d = provider.dim();
    let n = records.len();
    let mut data = vec![0.0; d * n];
    for (col, rec) in records.iter().enumerate() {
        if rec.embedding.len() != d {
            return Err(PromptError::Dim {
                expected: d,
                found: rec.embedding.len(),
            });
        }
        for (row, v) in rec.embedding.iter().enumerate() {
            data[row * n + col] = *v;
        }
    }
    Ok(Tensor::new(&[d, n], data)?)
}

/// Embeddings for a batch of windows, `[B, D_llm, N]`.
pub fn batch_embeddings(
    ds: &WindowedDataset,
    starts: &[usize],
    spec: &PromptTemplateSpec,
    provider: &impl Embedder,
) -> Result<Tensor, PromptError> {
    let d = provider.dim();
    let n = ds.num_channels();
    let mut data = Vec::with_capacity(starts.len() * d * n);
    for &s in starts {
        let records = prompt_records(&render_window(ds, s, spec), provider)?;
        data.extend_from_slice(embed_prompts(&records, provider)?.data());
    }
    Ok(Tensor::new(&[starts.len(), d, n], data)?)
}

/// Maps prompt embeddings into the model space: `X = E^T W + b + pos`,
/// reshaped to one length-1 token sequence per (sample, variable) row.
///
/// `e` is `[D_llm, N]` (shared by the whole batch) or `[B, D_llm, N]`.
pub fn adapt_semantics<'t>(
    e: &Var<'t>,
    weight: &Var<'t>,
    bias: &Var<'t>,
    pos: &Var<'t>,
    batch: usize,
) -> Result<Var<'t>, NumericsError> {
    let d = weight.shape()[weight.shape().len() - 1];
    let (b, n, x) = match e.shape() {
        &[_, n] => {
            let x = e.transpose_last2()?.matmul(weight)?.add(bias)?.add(pos)?;
            let x = x.reshape(&[1, n, d])?.broadcast_to(&[batch, n, d])?;
            (batch, n, x)
        }
        &[b, _, n] => {
            if b != batch {
                return Err(NumericsError::Shape(format!(
                    "prompt embeddings for {b} samples, batch has {batch}"
                )));
            }
            let x = e.transpose_last2()?.matmul(weight)?.add(bias)?.add(pos)?;
            (b, n, x)
        }
        other => {
            return Err(NumericsError::Shape(format!(
                "prompt embeddings must be [D_llm, N] or [B, D_llm, N], got {other:?}"
            )))
        }
    };
    x.reshape(&[b * n, 1, d])
}

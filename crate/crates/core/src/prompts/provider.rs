//! Embedding providers.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! magic    8 bytes "TSAFEMB1"
//! dim      u32     D_llm
//! count    u64
//! count times: 32-byte SHA-256 of the exact prompt text, dim x f64
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::PromptError;

const MAGIC: &[u8; 8] = b"TSAFEMB1";
const HASH_BITS: usize = 256;

pub type TextHash = [u8; 32];

pub fn text_hash(text: &str) -> TextHash {
    Sha256::digest(text.as_bytes()).into()
}

/// Source of frozen `D_llm`-dimensional prompt embeddings.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, PromptError>;
}

/// Deterministic stand-in for a language model: the text hash, read as a
/// vector of +/-1 bits, is pushed through a fixed seeded Gaussian projection
/// and normalized to unit length.
#[derive(Clone, Debug)]
pub struct StubEmbedder {
    seed: u64,
    dim: usize,
    projection: Vec<f64>,
}

impl StubEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * HASH_BITS)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { seed, dim, projection }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, PromptError> {
        let hash = text_hash(text);
        let bits: Vec<f64> = (0..HASH_BITS)
            .map(|i| if hash[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { -1.0 })
            .collect();
        let mut v: Vec<f64> = self
            .projection
            .chunks(HASH_BITS)
            .map(|row| row.iter().zip(&bits).map(|(a, b)| a * b).sum())
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        Ok(v)
    }
}

/// Embeddings produced offline, keyed by the hash of the exact prompt text.
#[derive(Clone, Debug, Default)]
pub struct FileEmbeddings {
    dim: usize,
    entries: HashMap<TextHash, Vec<f64>>,
}

impl FileEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, text: &str, embedding: Vec<f64>) -> Result<(), PromptError> {
        if embedding.len() != self.dim {
            return Err(PromptError::Dim {
                expected: self.dim,
                found: embedding.len(),
            });
        }
        self.entries.insert(text_hash(text), embedding);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), PromptError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        let mut keys: Vec<&TextHash> = self.entries.keys().collect();
        keys.sort();
        for k in keys {
            w.write_all(k)?;
            for v in &self.entries[k] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, PromptError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PromptError::Format("not an embedding file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut entries = HashMap::with_capacity(count);
        for _ in 0..count {
            let mut key = [0u8; 32];
            r.read_exact(&mut key)?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b8)?;
                v.push(f64::from_le_bytes(b8));
            }
            entries.insert(key, v);
        }
        Ok(Self { dim, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PromptError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl Embedder for FileEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, PromptError> {
        self.entries
            .get(&text_hash(text))
            .cloned()
            .ok_or_else(|| PromptError::MissingEmbedding {
                prefix: text.chars().take(48).collect(),
            })
    }
}

/// The two provider kinds behind one type.
#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    File(FileEmbeddings),
    Stub(StubEmbedder),
}

impl EmbeddingProvider {
    pub fn stub(seed: u64, dim: usize) -> Self {
        Self::Stub(StubEmbedder::new(seed, dim))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        Ok(Self::File(FileEmbeddings::load(path)?))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::File(_) => "file",
            Self::Stub(_) => "stub",
        }
    }
}

impl Embedder for EmbeddingProvider {
    fn dim(&self) -> usize {
        match self {
            Self::File(f) => f.dim(),
            Self::Stub(s) => s.dim(),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, PromptError> {
        match self {
            Self::File(f) => f.embed(text),
            Self::Stub(s) => s.embed(text),
        }
    }
}

//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "TSAFCKPT"
//! version      u32      1
//! seed         u64
//! config_hash  32 bytes SHA-256 of the config text
//! config_len   u32, then config_len bytes of UTF-8 config text
//! count        u32
//! count times:
//!   name_len u32, name bytes (UTF-8)
//!   rank u32, rank x u64 extents
//!   prod(extents) x f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{NumericsError, ParameterStore, Tensor};

const MAGIC: &[u8; 8] = b"TSAFCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub config_text: String,
    pub params: Vec<(String, Tensor)>,
}

pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl Checkpoint {
    pub fn from_store(store: &ParameterStore, config_text: &str, seed: u64) -> Self {
        Self {
            seed,
            config_hash: config_hash(config_text),
            config_text: config_text.to_string(),
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Overwrites matching parameters in `store`. Every stored parameter must
    /// exist there with the same shape.
    pub fn load_into(&self, store: &mut ParameterStore) -> Result<(), NumericsError> {
        for (name, t) in &self.params {
            store.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), NumericsError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        write_bytes(&mut w, self.config_text.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, NumericsError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NumericsError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NumericsError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let seed = read_u64(&mut r)?;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let config_text = read_string(&mut r)?;
        if self::config_hash(&config_text) != config_hash {
            return Err(NumericsError::Format("config hash does not match config text".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            params.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self {
            seed,
            config_hash,
            config_text,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NumericsError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NumericsError> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, NumericsError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NumericsError::Format(format!("invalid UTF-8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut store = ParameterStore::new(AdamConfig::default());
        store
            .insert("a.w", Tensor::new(&[2, 2], vec![0.1, -2.5, 1e-300, 7.0]).unwrap())
            .unwrap();
        store.insert("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        let ck = Checkpoint::from_store(&store, "depth = 2\n", 2024);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_magic_and_tampered_config() {
        assert!(Checkpoint::read(&b"NOTACKPT\0\0\0\0"[..]).is_err());
        let ck = Checkpoint::from_store(&ParameterStore::default(), "x = 1", 1);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let pos = buf.len() - 5; // inside the config text
        buf[pos] = b'y';
        assert!(matches!(
            Checkpoint::read(buf.as_slice()),
            Err(NumericsError::Format(_))
        ));
    }
}

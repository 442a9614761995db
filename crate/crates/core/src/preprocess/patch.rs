use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::numerics::Var;

use super::PreprocessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub lookback: usize,
    pub patch_len: usize,
    pub stride: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            patch_len: 16,
            stride: 8,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.stride == 0 || self.patch_len == 0 {
            return Err(PreprocessError::Config(
                "patch length and stride must be positive".into(),
            ));
        }
        if self.patch_len > self.lookback {
            return Err(PreprocessError::Config(format!(
                "patch length {} exceeds lookback {}",
                self.patch_len, self.lookback
            )));
        }
        Ok(())
    }

    /// `floor((L - P) / stride) + 1`; trailing steps past the last full patch are dropped.
    pub fn num_patches(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride + 1
    }
}

/// `[B, L, N]` into channel-independent patches `[(B*N), N_p, P]`.
/// Row `b*N + n` holds variable `n` of sample `b`; patch `i` covers steps
/// `[i*stride, i*stride + P)`.
pub fn make_patches<'t>(x: &Var<'t>, cfg: &PatchConfig) -> Result<Var<'t>, PreprocessError> {
    cfg.validate()?;
    let &[b, l, n] = x.shape() else {
        return Err(PreprocessError::Config(format!(
            "patching expects [B, L, N], got {:?}",
            x.shape()
        )));
    };
    if l != cfg.lookback {
        return Err(PreprocessError::Config(format!(
            "input length {l} does not match lookback {}",
            cfg.lookback
        )));
    }
    let np = cfg.num_patches();
    let p = cfg.patch_len;
    let mut index = Vec::with_capacity(b * n * np * p);
    for bi in 0..b {
        for c in 0..n {
            for i in 0..np {
                for j in 0..p {
                    let t = i * cfg.stride + j;
                    index.push((bi * l + t) * n + c);
                }
            }
        }
    }
    Ok(x.gather(&[b * n, np, p], Rc::from(index))?)
}

/// `patches @ W + b + pos`, the positional table broadcast over rows.
pub fn embed_patches<'t>(
    patches: &Var<'t>,
    proj_w: &Var<'t>,
    proj_b: &Var<'t>,
    pos: &Var<'t>,
) -> Result<Var<'t>, PreprocessError> {
    Ok(patches.matmul(proj_w)?.add(proj_b)?.add(pos)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn patch_count_default_lookback() {
        let cfg = PatchConfig {
            lookback: 96,
            patch_len: 16,
            stride: 8,
        };
        assert_eq!(cfg.num_patches(), 11);
    }

    #[test]
    fn single_patch_equals_window() {
        let cfg = PatchConfig {
            lookback: 5,
            patch_len: 5,
            stride: 5,
        };
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 5, 1], vec![1., 2., 3., 4., 5.]).unwrap());
        let p = make_patches(&x, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 1, 5]);
        assert_eq!(p.value().data(), &[1., 2., 3., 4., 5.]);
    }

    #[test]
    fn patch_longer_than_lookback_rejected() {
        let cfg = PatchConfig {
            lookback: 8,
            patch_len: 9,
            stride: 1,
        };
        assert!(matches!(cfg.validate(), Err(PreprocessError::Config(_))));
    }

    #[test]
    fn channel_independent_rows_and_overlap() {
        // two channels interleaved: ch0 = t, ch1 = 100 + t
        let l = 6;
        let data: Vec<f64> = (0..l).flat_map(|t| [t as f64, 100.0 + t as f64]).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, l, 2], data).unwrap());
        let cfg = PatchConfig {
            lookback: l,
            patch_len: 3,
            stride: 2,
        };
        let p = make_patches(&x, &cfg).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3]);
        assert_eq!(
            p.value().data(),
            &[0., 1., 2., 2., 3., 4., 100., 101., 102., 102., 103., 104.]
        );
    }

    #[test]
    fn embed_zero_patches_gives_pos_table() {
        let tape = Tape::new();
        let patches = tape.constant(Tensor::zeros(&[3, 2, 4]));
        let w = tape.constant(Tensor::full(&[4, 5], 0.3));
        let b = tape.constant(Tensor::zeros(&[5]));
        let pos_vals: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let pos = tape.constant(Tensor::new(&[2, 5], pos_vals.clone()).unwrap());
        let out = embed_patches(&patches, &w, &b, &pos).unwrap();
        assert_eq!(out.shape(), &[3, 2, 5]);
        for row in out.value().data().chunks(10) {
            assert_eq!(row, pos_vals.as_slice());
        }
    }

    #[test]
    fn embed_identity_projection_passes_patches() {
        let tape = Tape::new();
        let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let patches = tape.constant(Tensor::new(&[2, 2, 3], vals.clone()).unwrap());
        let eye = tape.constant(Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]));
        let pos = tape.constant(Tensor::zeros(&[2, 3]));
        let out = embed_patches(&patches, &eye, &b, &pos).unwrap();
        assert_eq!(out.value().data(), vals.as_slice());
    }

    #[test]
    fn embed_shape_algebra() {
        let tape = Tape::new();
        let patches = tape.constant(Tensor::zeros(&[2 * 7, 11, 16]));
        let w = tape.constant(Tensor::zeros(&[16, 64]));
        let b = tape.constant(Tensor::zeros(&[64]));
        let pos = tape.constant(Tensor::zeros(&[11, 64]));
        assert_eq!(embed_patches(&patches, &w, &b, &pos).unwrap().shape(), &[14, 11, 64]);
    }
}

use crate::numerics::{Tensor, Var};

use super::PreprocessError;

/// Per-(sample, channel) statistics captured by a normalize call.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinState {
    /// `[B, 1, N]`
    pub mean: Tensor,
    /// `[B, 1, N]`, clamped to at least `eps`.
    pub std: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RevinMode {
    Norm,
    Denorm,
}

/// Learnable per-channel affine applied after standardization.
#[derive(Clone, Copy)]
pub struct RevinAffine<'a, 't> {
    pub gain: &'a Var<'t>,
    pub bias: &'a Var<'t>,
}

/// Reversible instance normalization over the time axis of `[B, L, N]` inputs.
///
/// Uses the population standard deviation. Statistics are treated as
/// constants, so gradients flow only through the values and the affine.
#[derive(Clone, Debug)]
pub struct Revin {
    pub eps: f64,
    state: Option<RevinState>,
}

impl Default for Revin {
    fn default() -> Self {
        Self::new(1e-5)
    }
}

impl Revin {
    pub fn new(eps: f64) -> Self {
        Self { eps, state: None }
    }

    pub fn state(&self) -> Option<&RevinState> {
        self.state.as_ref()
    }

    pub fn apply<'t>(
        &mut self,
        mode: RevinMode,
        x: &Var<'t>,
        affine: Option<RevinAffine<'_, 't>>,
    ) -> Result<Var<'t>, PreprocessError> {
        match mode {
            RevinMode::Norm => self.normalize(x, affine),
            RevinMode::Denorm => self.denormalize(x, affine),
        }
    }

    pub fn normalize<'t>(
        &mut self,
        x: &Var<'t>,
        affine: Option<RevinAffine<'_, 't>>,
    ) -> Result<Var<'t>, PreprocessError> {
        let state = window_stats(x.value(), self.eps)?;
        let tape = x.tape();
        let mean = tape.constant(state.mean.clone());
        let std = tape.constant(state.std.clone());
        let mut y = x.sub(&mean)?.div(&std)?;
        if let Some(a) = affine {
            y = y.mul(a.gain)?.add(a.bias)?;
        }
        self.state = Some(state);
        Ok(y)
    }

    /// Inverts the most recent [`normalize`](Self::normalize), affine included.
    /// `y` may have a different time extent than the normalized input.
    pub fn denormalize<'t>(
        &self,
        y: &Var<'t>,
        affine: Option<RevinAffine<'_, 't>>,
    ) -> Result<Var<'t>, PreprocessError> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| PreprocessError::Usage("RevIN denorm called before norm captured statistics".into()))?;
        let tape = y.tape();
        let mut y = y.clone();
        if let Some(a) = affine {
            let denom = a.gain.add_scalar(self.eps * self.eps)?;
            y = y.sub(a.bias)?.div(&denom)?;
        }
        let mean = tape.constant(state.mean.clone());
        let std = tape.constant(state.std.clone());
        Ok(y.mul(&std)?.add(&mean)?)
    }
}

fn window_stats(x: &Tensor, eps: f64) -> Result<RevinState, PreprocessError> {
    let &[b, l, n] = x.shape() else {
        return Err(PreprocessError::Config(format!(
            "RevIN expects [B, L, N], got {:?}",
            x.shape()
        )));
    };
    let d = x.data();
    let mut mean = vec![0.0; b * n];
    let mut std = vec![0.0; b * n];
    for bi in 0..b {
        for c in 0..n {
            let at = |t: usize| d[(bi * l + t) * n + c];
            let m = (0..l).map(at).sum::<f64>() / l as f64;
            let var = (0..l).map(|t| (at(t) - m).powi(2)).sum::<f64>() / l as f64;
            mean[bi * n + c] = m;
            std[bi * n + c] = var.sqrt().max(eps);
        }
    }
    Ok(RevinState {
        mean: Tensor::new(&[b, 1, n], mean)?,
        std: Tensor::new(&[b, 1, n], std)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normalizes_hand_example() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3, 1], vec![1., 2., 3.]).unwrap());
        let mut revin = Revin::default();
        let y = revin.normalize(&x, None).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (v, e) in y.value().data().iter().zip(expect) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-4);
        }
    }

    #[test]
    fn constant_window_maps_to_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 5, 3], 4.2));
        let mut revin = Revin::default();
        let y = revin.normalize(&x, None).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert!(revin.state().unwrap().std.data().iter().all(|&s| s >= revin.eps));
    }

    #[test]
    fn denorm_before_norm_is_usage_error() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::zeros(&[1, 2, 1]));
        let mut revin = Revin::default();
        assert!(matches!(
            revin.apply(RevinMode::Denorm, &y, None),
            Err(PreprocessError::Usage(_))
        ));
    }

    #[test]
    fn roundtrip_with_affine() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 4, 2], vec![1., 10., 2., -3., 5., 0.5, 7., 2.]).unwrap());
        let gain = tape.leaf(Tensor::from_vec(vec![1.7, 0.4]));
        let bias = tape.leaf(Tensor::from_vec(vec![-0.3, 2.0]));
        let affine = RevinAffine {
            gain: &gain,
            bias: &bias,
        };
        let mut revin = Revin::default();
        let y = revin.apply(RevinMode::Norm, &x, Some(affine)).unwrap();
        let back = revin.apply(RevinMode::Denorm, &y, Some(affine)).unwrap();
        assert!(back.value().max_abs_diff(x.value()) < 1e-6);
    }
}

//! Central finite-difference oracle for tape gradients.
//!
//! The finite-difference side only ever calls the forward closure, so it is
//! independent of every backward rule it checks.

use super::{NumericsError, ParameterStore, Params, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, Euclidean
    /// norms; see [`SCALE_FLOOR`] for the floor.
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Absolute lower bound of the relative-error denominator.
pub const NORM_FLOOR: f64 = 1e-8;

/// The denominator is also at least this fraction of the largest analytic
/// gradient norm in the check, so structurally zero gradients (key biases
/// under softmax) are compared against the overall scale instead of
/// finite-difference roundoff.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Compares analytic gradients of `loss_fn` against central differences with
/// step `h` for every parameter named by `filter`.
pub fn check<F>(
    store: &mut ParameterStore,
    h: f64,
    filter: impl Fn(&str) -> bool,
    loss_fn: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &Params<'t>) -> Result<Var<'t>, NumericsError>,
{
    let names: Vec<String> = store.names().filter(|n| filter(n)).map(str::to_string).collect();

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let params = store.bind(&tape);
        let loss = loss_fn(&tape, &params)?;
        let grads = tape.backward(&loss)?;
        names
            .iter()
            .map(|n| params.get(n).map(|v| grads.get_or_zeros(v)))
            .collect::<Result<_, _>>()?
    };

    let eval = |store: &ParameterStore| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let params = store.bind(&tape);
        Ok(loss_fn(&tape, &params)?.value().item())
    };

    let floor = analytic.iter().map(Tensor::l2_norm).fold(0.0, f64::max) * SCALE_FLOOR;
    let floor = floor.max(NORM_FLOOR);
    let mut checks = Vec::with_capacity(names.len());
    for (name, analytic) in names.into_iter().zip(analytic) {
        let n = analytic.len();
        let mut numeric = Tensor::zeros(analytic.shape());
        for i in 0..n {
            let orig = store.get(&name).expect("listed above").data()[i];
            store.value_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.value_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.value_mut(&name).unwrap().data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * h);
        }
        let diff = analytic.max_abs_diff(&numeric);
        let rel_err = if diff == 0.0 {
            0.0
        } else {
            let d: f64 = analytic
                .data()
                .iter()
                .zip(numeric.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            d / analytic.l2_norm().max(numeric.l2_norm()).max(floor)
        };
        checks.push(ParamCheck {
            name,
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheckReport { checks })
}

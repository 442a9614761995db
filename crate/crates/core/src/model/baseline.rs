use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::INIT_STD;
use crate::numerics::{AdamConfig, ParameterStore, Params, Var};
use crate::preprocess::Revin;

use super::train::Forecaster;
use super::ModelError;

/// Instance-normalized channel-independent linear map from history to
/// horizon; a feasibility oracle for the full model.
#[derive(Clone, Debug)]
pub struct LinearBaseline {
    lookback: usize,
    horizon: usize,
    n_vars: usize,
    revin_eps: f64,
    store: ParameterStore,
}

impl LinearBaseline {
    pub fn new(lookback: usize, horizon: usize, n_vars: usize, seed: u64) -> Result<Self, ModelError> {
        let mut store = ParameterStore::new(AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.insert_trunc_normal("linear.w", &[lookback, horizon], INIT_STD, &mut rng)?;
        store.insert("linear.b", crate::numerics::Tensor::zeros(&[horizon]))?;
        Ok(Self {
            lookback,
            horizon,
            n_vars,
            revin_eps: 1e-5,
            store,
        })
    }
}

impl Forecaster for LinearBaseline {
    fn lookback(&self) -> usize {
        self.lookback
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn n_vars(&self) -> usize {
        self.n_vars
    }

    fn prompt_dim(&self) -> Option<usize> {
        None
    }

    fn store(&self) -> &ParameterStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    fn predict<'t>(&self, p: &Params<'t>, x: &Var<'t>, _e: Option<&Var<'t>>) -> Result<Var<'t>, ModelError> {
        let mut revin = Revin::new(self.revin_eps);
        let xn = revin.normalize(x, None)?;
        let y = xn
            .permute(&[0, 2, 1])?
            .matmul(p.get("linear.w")?)?
            .add(p.get("linear.b")?)?
            .permute(&[0, 2, 1])?;
        Ok(revin.denormalize(&y, None)?)
    }
}

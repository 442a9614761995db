//! Variance of semantic noise accumulated by synchronous injection at every
//! layer versus asynchronous injection at a few stages.
//!
//! Each injection contributes `lambda * eps` with `Var(eps) <= sigma^2`.
//! Synchronous injection sums `L` such terms, asynchronous injection `S`.
//! Cauchy-Schwarz bounds the two variances by `L^2 lambda^2 sigma^2` and
//! `S^2 lambda_max^2 sigma^2`, tight when every `eps` is the same variable.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::sigmoid;

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("invalid noise spec: {0}")]
    Spec(String),
}

/// Joint law of the per-layer noise terms.
/// Serialized as `iid`, `fully_correlated` or `rho=<value>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Correlation {
    Iid,
    /// One shared draw for every layer.
    FullyCorrelated,
    /// Pairwise correlation `rho` through a shared factor. Interpolates
    /// the two cases above.
    Uniform {
        rho: f64,
    },
}

impl Correlation {
    pub fn rho(&self) -> f64 {
        match self {
            Correlation::Iid => 0.0,
            Correlation::FullyCorrelated => 1.0,
            Correlation::Uniform { rho } => *rho,
        }
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Iid => f.write_str("iid"),
            Correlation::FullyCorrelated => f.write_str("fully_correlated"),
            Correlation::Uniform { rho } => write!(f, "rho={rho}"),
        }
    }
}

impl FromStr for Correlation {
    type Err = TheoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iid" => Ok(Correlation::Iid),
            "fully_correlated" | "full" => Ok(Correlation::FullyCorrelated),
            _ => s
                .strip_prefix("rho=")
                .and_then(|r| r.parse::<f64>().ok())
                .filter(|r| (0.0..=1.0).contains(r))
                .map(|rho| Correlation::Uniform { rho })
                .ok_or_else(|| {
                    TheoryError::Spec(format!("correlation {s:?} is not iid, fully_correlated or rho=<0..1>"))
                }),
        }
    }
}

impl TryFrom<String> for Correlation {
    type Error = TheoryError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Correlation> for String {
    fn from(c: Correlation) -> Self {
        c.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation of each noise term.
    pub sigma: f64,
    pub correlation: Correlation,
    /// Synchronous injection strength.
    pub lambda: f64,
    /// Per-stage asynchronous strengths; `lambda` for every stage when empty.
    pub stage_lambdas: Vec<f64>,
    /// Depth `L`.
    pub depth: usize,
    /// Stage count `S`.
    pub stages: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            correlation: Correlation::Iid,
            lambda: 1.0,
            stage_lambdas: Vec::new(),
            depth: 6,
            stages: 2,
            trials: 1_000_000,
            seed: 2024,
        }
    }
}

pub const MIN_TRIALS: usize = 10_000;

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let err = |m: String| Err(TheoryError::Spec(m));
        if self.stages > self.depth {
            return err(format!("{} stages exceed depth {}", self.stages, self.depth));
        }
        if !self.stage_lambdas.is_empty() && self.stage_lambdas.len() != self.stages {
            return err(format!(
                "{} stage strengths for {} stages",
                self.stage_lambdas.len(),
                self.stages
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return err(format!("sigma {} must be finite and nonnegative", self.sigma));
        }
        let rho = self.correlation.rho();
        if !(0.0..=1.0).contains(&rho) {
            return err(format!("correlation {rho} outside [0, 1]"));
        }
        Ok(())
    }

    pub fn stage_strengths(&self) -> Vec<f64> {
        if self.stage_lambdas.is_empty() {
            vec![self.lambda; self.stages]
        } else {
            self.stage_lambdas.clone()
        }
    }

    pub fn lambda_max(&self) -> f64 {
        self.stage_strengths().iter().fold(0.0, |m, l| m.max(l.abs()))
    }

    /// Layers (0-based) whose noise the asynchronous sum picks up: the
    /// last layer of each of `S` equal intervals.
    fn stage_layers(&self) -> Vec<usize> {
        (1..=self.stages)
            .map(|s| (s * self.depth).div_ceil(self.stages) - 1)
            .collect()
    }
}

/// `L^2 lambda^2 sigma^2`
pub fn var_sync_bound(spec: &NoiseSpec) -> f64 {
    let l = spec.depth as f64;
    l * l * spec.lambda * spec.lambda * spec.sigma * spec.sigma
}

/// `S^2 lambda_max^2 sigma^2`
pub fn var_async_bound(spec: &NoiseSpec) -> f64 {
    let s = spec.stages as f64;
    let lm = spec.lambda_max();
    s * s * lm * lm * spec.sigma * spec.sigma
}

/// Exact variance of `sum_i w_i eps_i` under the spec's correlation model.
fn exact_variance(weights: &[f64], sigma: f64, rho: f64) -> f64 {
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    sigma * sigma * ((1.0 - rho) * sum_sq + rho * sum * sum)
}

/// Exact synchronous variance under the correlation model.
pub fn var_sync_exact(spec: &NoiseSpec) -> f64 {
    exact_variance(&vec![spec.lambda; spec.depth], spec.sigma, spec.correlation.rho())
}

/// Exact asynchronous variance under the correlation model.
pub fn var_async_exact(spec: &NoiseSpec) -> f64 {
    exact_variance(&spec.stage_strengths(), spec.sigma, spec.correlation.rho())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// Unbiased sample variance.
    pub var: f64,
    /// Standard error of `var`, `sqrt((m4 - var^2) / n)`.
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub sync: VarianceEstimate,
    pub asynchronous: VarianceEstimate,
    /// `var_async / var_sync`, zero when both vanish.
    pub ratio: f64,
    pub sync_bound: f64,
    pub async_bound: f64,
    /// Both sample variances sit below their bounds, allowing five standard errors.
    pub bound_ok: bool,
}

#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    s1: f64,
    s2: f64,
    s3: f64,
    s4: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        let x2 = x * x;
        self.n += 1.0;
        self.s1 += x;
        self.s2 += x2;
        self.s3 += x2 * x;
        self.s4 += x2 * x2;
    }

    fn merge(mut self, o: &Moments) -> Self {
        self.n += o.n;
        self.s1 += o.s1;
        self.s2 += o.s2;
        self.s3 += o.s3;
        self.s4 += o.s4;
        self
    }

    fn estimate(&self) -> VarianceEstimate {
        let n = self.n;
        let m = self.s1 / n;
        let m2 = (self.s2 / n - m * m).max(0.0);
        let m4 = (self.s4 / n - 4.0 * m * self.s3 / n + 6.0 * m * m * self.s2 / n - 3.0 * m.powi(4)).max(0.0);
        VarianceEstimate {
            var: m2 * n / (n - 1.0),
            stderr: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        }
    }
}

/// Trials are split into this many independently seeded streams, so
/// results do not depend on the worker count.
const STREAMS: usize = 64;

/// Monte-Carlo estimate of both accumulated-noise variances.
pub fn simulate_accumulation(spec: &NoiseSpec) -> Result<SimulationResult, TheoryError> {
    spec.validate()?;
    if spec.trials < MIN_TRIALS {
        return Err(TheoryError::Spec(format!(
            "{} trials, need at least {MIN_TRIALS}",
            spec.trials
        )));
    }
    let rho = spec.correlation.rho();
    let (shared, own) = (rho.sqrt(), (1.0 - rho).sqrt());
    let stage_layers = spec.stage_layers();
    let stage_lambdas = spec.stage_strengths();
    let per_stream = spec.trials.div_ceil(STREAMS);

    let parts: Vec<(Moments, Moments)> = (0..STREAMS)
        .into_par_iter()
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream as u64);
            let count = per_stream.min(spec.trials.saturating_sub(stream * per_stream));
            let mut eps = vec![0.0; spec.depth];
            let (mut sync, mut asy) = (Moments::default(), Moments::default());
            for _ in 0..count {
                let common: f64 = rng.sample(StandardNormal);
                for e in eps.iter_mut() {
                    let z: f64 = if own > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    *e = spec.sigma * (shared * common + own * z);
                }
                sync.push(spec.lambda * eps.iter().sum::<f64>());
                asy.push(
                    stage_layers
                        .iter()
                        .zip(&stage_lambdas)
                        .map(|(&l, lam)| lam * eps[l])
                        .sum(),
                );
            }
            (sync, asy)
        })
        .collect();
    let (sync, asy) = parts
        .iter()
        .fold((Moments::default(), Moments::default()), |(a, b), (s, t)| {
            (a.merge(s), b.merge(t))
        });

    let sync = sync.estimate();
    let asynchronous = asy.estimate();
    let sync_bound = var_sync_bound(spec);
    let async_bound = var_async_bound(spec);
    let within = |e: &VarianceEstimate, bound: f64| e.var == 0.0 || e.var <= bound * (1.0 + 5.0 * e.stderr / e.var);
    Ok(SimulationResult {
        ratio: if sync.var > 0.0 {
            asynchronous.var / sync.var
        } else {
            0.0
        },
        bound_ok: within(&sync, sync_bound) && within(&asynchronous, async_bound),
        sync,
        asynchronous,
        sync_bound,
        async_bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub gate: f64,
    pub strength: f64,
    /// Asynchronous bound with every stage strength scaled by `strength`.
    pub async_bound: f64,
}

/// How a sigmoid gate on each stage scales the asynchronous bound.
pub fn gate_attenuation_curve(spec: &NoiseSpec, gates: &[f64]) -> Vec<GateRow> {
    gates
        .iter()
        .map(|&g| {
            let strength = sigmoid(g);
            let scaled = NoiseSpec {
                stage_lambdas: spec.stage_strengths().iter().map(|l| l * strength).collect(),
                ..spec.clone()
            };
            GateRow {
                gate: g,
                strength,
                async_bound: var_async_bound(&scaled),
            }
        })
        .collect()
}

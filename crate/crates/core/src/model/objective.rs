use serde::{Deserialize, Serialize};

use crate::numerics::{ParameterStore, Tensor, Var};

use super::ModelError;

/// Differentiable data term `(1/B) * sum_b ||Y_hat_b - Y_b||^2`.
pub fn data_loss<'t>(y_hat: &Var<'t>, y: &Var<'t>) -> Result<Var<'t>, ModelError> {
    if y_hat.shape() != y.shape() {
        return Err(ModelError::Shape(format!(
            "forecast {:?} vs target {:?}",
            y_hat.shape(),
            y.shape()
        )));
    }
    let batch = y.shape()[0] as f64;
    Ok(y_hat.sub(y)?.square()?.sum()?.scale(1.0 / batch)?)
}

/// Full objective value: data term plus `alpha * sum(theta^2)` over `params`.
///
/// Training differentiates only [`data_loss`]; the decay term is applied
/// inside the optimizer step.
pub fn loss(y_hat: &Tensor, y: &Tensor, params: &ParameterStore, alpha: f64) -> Result<f64, ModelError> {
    if y_hat.shape() != y.shape() {
        return Err(ModelError::Shape(format!(
            "forecast {:?} vs target {:?}",
            y_hat.shape(),
            y.shape()
        )));
    }
    let batch = y.shape()[0] as f64;
    let sq: f64 = y_hat.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sq / batch + alpha * params.sum_squares())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Element-weighted running MSE/MAE, so uneven final batches count exactly.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    sum_sq: f64,
    sum_abs: f64,
    count: usize,
}

impl MetricAccumulator {
    pub fn update(&mut self, y_hat: &Tensor, y: &Tensor) -> Result<(), ModelError> {
        if y_hat.shape() != y.shape() {
            return Err(ModelError::Shape(format!(
                "forecast {:?} vs target {:?}",
                y_hat.shape(),
                y.shape()
            )));
        }
        for (a, b) in y_hat.data().iter().zip(y.data()) {
            let d = a - b;
            self.sum_sq += d * d;
            self.sum_abs += d.abs();
        }
        self.count += y.len();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Metrics {
        if self.count == 0 {
            return Metrics::default();
        }
        Metrics {
            mse: self.sum_sq / self.count as f64,
            mae: self.sum_abs / self.count as f64,
        }
    }
}

/// Mean squared and mean absolute error over every element.
pub fn metrics(y_hat: &Tensor, y: &Tensor) -> Result<Metrics, ModelError> {
    let mut acc = MetricAccumulator::default();
    acc.update(y_hat, y)?;
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{AdamConfig, Tape};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let empty = ParameterStore::new(AdamConfig::default());
        assert_eq!(loss(&t(&[1., 2.]), &t(&[1., 2.]), &empty, 0.0).unwrap(), 0.0);
        assert_eq!(loss(&t(&[1., 2.]), &t(&[0., 0.]), &empty, 0.0).unwrap(), 5.0);
        let mut theta = ParameterStore::new(AdamConfig::default());
        theta.insert("theta", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(loss(&t(&[3.]), &t(&[3.]), &theta, 1.0).unwrap(), 5.0);
        assert!(loss(&t(&[1.]), &t(&[1., 2.]), &empty, 0.0).is_err());
    }

    #[test]
    fn data_loss_divides_by_batch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 1, 1], vec![1., 2.]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 1, 1]));
        assert_eq!(data_loss(&a, &b).unwrap().value().item(), 2.5);
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&t(&[2., 4.]), &t(&[1., 2.])).unwrap();
        assert_eq!((m.mse, m.mae), (2.5, 1.5));
        let m = metrics(&t(&[1., 2.]), &t(&[1., 2.])).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        let y = t(&[0.3, -1.0, 7.0]);
        let m = metrics(&y.map(|v| v - 0.5), &y).unwrap();
        assert!((m.mse - 0.25).abs() < 1e-12 && (m.mae - 0.5).abs() < 1e-12);
    }
}

//! Full-batch gradient descent on a tiny fixed dataset.

use super::Model;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Largest batch and resolution accepted by [`train_toy`].
pub const TOY_MAX_BATCH: usize = 32;
pub const TOY_MAX_RESOLUTION: usize = 32;

#[derive(Debug, Clone)]
pub struct ToyData {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ToyData {
    /// Uniform `[-1, 1)` images with uniformly drawn labels.
    pub fn random(samples: usize, classes: usize, resolution: usize, rng: &mut Rng) -> Self {
        let inputs = rng.tensor(Shape::new(samples, 3, resolution, resolution), -1.0, 1.0);
        let labels = (0..samples).map(|_| rng.below(classes)).collect();
        Self { inputs, labels }
    }
}

fn loss_and_step(model: &mut Model, data: &ToyData, lr: f32, step: usize, update: bool) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let params = model.bind(&mut g, update);
    let x = g.constant(data.inputs.clone());
    let logits = model.forward_graph(&mut g, x, &params)?;
    let loss = g.softmax_cross_entropy(logits, &data.labels)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { step, loss: value });
    }
    if update && lr != 0.0 {
        let grads = g.backward(loss, Tensor::scalar(1.0))?;
        for ((_, id), (_, t)) in params.iter().zip(model.params_mut()) {
            if let Some(grad) = grads.get(id) {
                for (w, &d) in t.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * d;
                }
            }
        }
    }
    Ok(value)
}

/// Runs `steps` gradient-descent steps on mean cross-entropy.
///
/// Returns `steps + 1` losses: the loss before each step, then the final
/// loss.
pub fn train_toy(model: &mut Model, data: &ToyData, steps: usize, lr: f32) -> Result<Vec<f64>> {
    let s = data.inputs.shape();
    if s.batch == 0 || s.batch > TOY_MAX_BATCH || s.height > TOY_MAX_RESOLUTION || s.width > TOY_MAX_RESOLUTION {
        return Err(Error::invalid(
            "train_toy",
            format!("input {s} exceeds batch {TOY_MAX_BATCH} or resolution {TOY_MAX_RESOLUTION}"),
        ));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid("train_toy", format!("learning rate {lr} must be finite and >= 0")));
    }
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        trace.push(loss_and_step(model, data, lr, step, true)?);
    }
    trace.push(loss_and_step(model, data, lr, steps, false)?);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_variant, VariantConfig};

    #[test]
    fn zero_lr_is_constant() {
        let mut m = build_variant(&VariantConfig::toy(4), &mut Rng::new(3)).unwrap();
        let data = ToyData::random(4, 4, 32, &mut Rng::new(4));
        let trace = train_toy(&mut m, &data, 3, 0.0).unwrap();
        assert_eq!(trace.len(), 4);
        assert!(trace.iter().all(|&l| l == trace[0]));
    }

    #[test]
    fn one_small_step_descends() {
        let mut m = build_variant(&VariantConfig::toy(4), &mut Rng::new(3)).unwrap();
        let data = ToyData::random(4, 4, 32, &mut Rng::new(4));
        let trace = train_toy(&mut m, &data, 1, 1e-3).unwrap();
        assert!(trace[1] < trace[0], "{trace:?}");
    }

    #[test]
    fn rejects_large_inputs() {
        let mut m = build_variant(&VariantConfig::toy(4), &mut Rng::new(3)).unwrap();
        let data = ToyData::random(2, 4, 64, &mut Rng::new(4));
        assert!(train_toy(&mut m, &data, 1, 0.1).is_err());
    }
}

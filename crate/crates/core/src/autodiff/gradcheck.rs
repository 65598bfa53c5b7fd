//! Central finite differences against reverse-mode gradients.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_err: f64,
    /// Input index and flat coordinate where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks the gradient of the scalar `f(x)` with respect to `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    finite_diff_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), eps)
}

/// Checks the gradient of the scalar `f(x_0, .., x_k)` with respect to every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("eps {eps} outside [1e-7, 1e-4]"),
        ));
    }
    let eval = |values: Vec<Tensor<f64>>| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.into_iter().map(|v| g.leaf(v)).collect();
        let out = f(&mut g, &ids)?;
        if g.value(out).shape() != Shape::new(1, 1, 1, 1) {
            return Err(Error::invalid(
                "finite_diff_check",
                format!("function output {} is not a scalar", g.value(out).shape()),
            ));
        }
        Ok((g, ids, out))
    };

    let (g, ids, out) = eval(inputs.to_vec())?;
    let grads = g.backward(out, Tensor::scalar(1.0))?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (which, (x, &id)) in inputs.iter().zip(&ids).enumerate() {
        let analytic = grads.get_or_zeros(id, x.shape());
        for i in 0..x.numel() {
            let probe = |delta: f64| -> Result<f64> {
                let mut values = inputs.to_vec();
                let shape = values[which].shape();
                let mut data = values[which].clone().into_data();
                data[i] += delta;
                values[which] = Tensor::from_parts(shape, data);
                let (g, _, out) = eval(values)?;
                Ok(g.value(out).item())
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_err || report.coordinates == 1 {
                report.max_rel_err = err;
                report.worst = (which, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn quadratic() {
        let mut rng = Rng::new(1);
        let x = rng.tensor::<f64>(Shape::new(1, 2, 3, 3), -2.0, 2.0);
        let report = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let half = g.scale(sq, 0.5);
                Ok(g.sum_all(half))
            },
            &x,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        assert!(finite_diff_check(|g, x| Ok(g.sum_all(x)), &x, 1e-3).is_err());
        assert!(finite_diff_check(|g, x| Ok(g.sum_all(x)), &x, 1e-8).is_err());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 2));
        assert!(finite_diff_check(|g, x| Ok(g.relu(x)), &x, 1e-5).is_err());
    }
}

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Central-difference comparison against an analytic gradient.
///
/// Returns the largest `|a − n| / max(1, |a|, |n|)` over all coordinates,
/// where `a` is the analytic and `n` the numerical partial derivative.
pub fn finite_diff_check<F>(mut f: F, theta: &Tensor, analytic: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.shape() != theta.shape() {
        return Err(Error::Dimension(format!(
            "gradient {:?} does not match parameter {:?}",
            analytic.shape(),
            theta.shape()
        )));
    }
    let mut probe = theta.clone();
    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs `build` on fresh graphs to compare backward-pass gradients of every
/// input with finite differences. `build` receives the input nodes and
/// returns a scalar node.
pub fn check_graph<B>(build: B, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<_> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok((g, ids, out))
    };
    let (mut g, ids, out) = eval(inputs)?;
    g.backward(out)?;
    let grads: Vec<Tensor> = ids.iter().map(|&id| g.grad(id)).collect();

    let mut errors = Vec::with_capacity(inputs.len());
    for (k, grad) in grads.iter().enumerate() {
        let mut values = inputs.to_vec();
        let err = finite_diff_check(
            |theta| {
                values[k] = theta.clone();
                let (g, _, out) = eval(&values)?;
                g.value(out).item()
            },
            &inputs[k],
            grad,
            step,
        )?;
        errors.push(err);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let analytic = Tensor::new(vec![2], vec![2.0, 4.0]).unwrap();
        // central differences carry no truncation error here, so a coarse
        // step keeps rounding error out of the way
        let err = finite_diff_check(|t| Ok(t.sum_sq()), &theta, &analytic, 1e-2).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn linear_is_exact() {
        let theta = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let w = [3.0, -2.0, 0.25];
        let analytic = Tensor::new(vec![3], w.to_vec()).unwrap();
        let f = |t: &Tensor| Ok(t.data().iter().zip(&w).map(|(a, b)| a * b).sum());
        let err = finite_diff_check(f, &theta, &analytic, 1e-2).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let theta = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let analytic = Tensor::new(vec![2], vec![2.0, 5.0]).unwrap();
        let err = finite_diff_check(|t| Ok(t.sum_sq()), &theta, &analytic, 1e-6).unwrap();
        assert!(err > 0.1);
    }
}

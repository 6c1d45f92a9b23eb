use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function of several tensors.
pub fn numeric_gradient(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = f(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let down = f(&work)?;
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)` over all entries.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Checks the tape gradients of `f` against central finite differences.
///
/// `f` builds a scalar from one leaf per input tensor. Returns the maximum
/// relative error over every entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &leaves)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let value = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let numeric = numeric_gradient(&value, inputs, eps)?;
    Ok(compare_gradients(&analytic, &numeric))
}

//! Central finite-difference verification of graph gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar-valued graph with central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`.
///
/// `build` receives the graph and one leaf per entry of `inputs`. Returns the
/// maximum over all input elements of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::Contract(format!(
            "gradient_check needs a scalar output, got shape {:?}",
            g.shape(out)
        )));
    }
    let grads = g.backward(out)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

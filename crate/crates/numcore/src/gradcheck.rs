//! Central-difference gradient oracle.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest relative disagreement between reverse-mode gradients of `f` and
/// central differences, measured as `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` builds a scalar on a fresh graph from one leaf per entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Contract(format!(
            "grad_check step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    let eval = |ps: &[Tensor], param: usize, element: usize| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let y = f(&mut g, &vars)
            .and_then(|r| g.value(r).item())
            .map_err(|_| TensorError::Probe { param, element })?;
        if !y.is_finite() {
            return Err(TensorError::Probe { param, element });
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let orig = p.data()[e];
            probe[pi].data_mut()[e] = orig + eps;
            let fp = eval(&probe, pi, e)?;
            probe[pi].data_mut()[e] = orig - eps;
            let fm = eval(&probe, pi, e)?;
            probe[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic[pi].data()[e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

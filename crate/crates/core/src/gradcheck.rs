//! Central finite-difference gradient checking.

use crate::autograd::Var;
use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Relative error `|a - n| / max(|a|, |n|)` in the 2-norm between the
/// analytic gradient and a central-difference estimate, per input.
///
/// `f` must reduce to a scalar and be deterministic.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let leaves: Vec<Var> = inputs.iter().cloned().map(Var::leaf).collect();
    let out = f(&leaves)?;
    let grads = out.backward();
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&leaves[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                Ok(f(&vars)?.data()[0])
            };
            *slot = (eval(step)? - eval(-step)?) / (2.0 * step);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Gradient check over the parameters of a model.
///
/// Compares the analytic gradient of `f(ps)` against central differences on
/// up to `per_param` evenly spaced entries of every parameter tensor and
/// returns the relative error over all probed entries.
pub fn check_params<F>(ps: &ParamStore, f: F, step: f64, per_param: usize) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<Var>,
{
    let out = f(ps)?;
    let grads = out.backward();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = ps.clone();
    for id in ps.ids() {
        let base = ps.value(id).clone();
        let n = base.numel();
        let count = per_param.min(n).max(1);
        let g = grads.get(ps.get(id));
        for s in 0..count {
            let j = s * n / count;
            analytic.push(g.map_or(0.0, |g| g[j]));
            let mut eval = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[j] += delta;
                probe.set(id, t)?;
                Ok(f(&probe)?.data()[0])
            };
            let d = (eval(step)? - eval(-step)?) / (2.0 * step);
            numeric.push(d);
        }
        probe.set(id, base)?;
    }
    Ok(relative_error(&analytic, &numeric))
}

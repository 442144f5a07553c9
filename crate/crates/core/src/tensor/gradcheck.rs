use super::{Graph, Precision, Scalar, Tensor, Var};
use crate::error::{bail, Result};

/// Compares backprop gradients against central differences.
///
/// `build` receives a fresh graph and one [`Var`] per entry of `params`
/// (all marked `requires_grad`) and must return a scalar loss. Every
/// coordinate of every parameter is perturbed by `±epsilon`. Returns the
/// worst relative error `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<T, F>(params: &[Tensor<T>], epsilon: f64, build: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if T::PRECISION != Precision::F64 {
        bail!(Usage, "grad_check requires F64 precision");
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        bail!(Input, "epsilon must be positive, got {epsilon}");
    }
    let eval = |ps: &[Tensor<T>], backprop: bool| -> Result<(f64, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| g.leaf(p.clone().with_requires_grad(backprop)))
            .collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).data()[0].as_f64();
        if !backprop {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(ps)
            .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| vec![T::zero(); p.len()]))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, grad) in grads.iter().enumerate() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = T::of(orig.as_f64() + epsilon);
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[j] = T::of(orig.as_f64() - epsilon);
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

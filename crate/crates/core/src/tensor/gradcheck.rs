//! Central-difference gradient checking.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Largest relative disagreement between the analytic gradient of `f` and a
/// central-difference estimate with step `h`, over every element of every input.
///
/// The relative error of one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// `f` must return a scalar tensor.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let tracked: Vec<Tensor<T>> = inputs.iter().map(|t| t.detached(true)).collect();
    let root = f(&tracked)?;
    if root.numel() != 1 {
        return Err(Error::Invalid("grad_check needs a scalar-valued function".into()));
    }
    root.backward()?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| match t.grad_vec() {
            Some(g) => g.iter().map(|v| v.f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let probe: Vec<Tensor<T>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut data = t.data().to_vec();
                    data[idx] = T::of(data[idx].f64() + delta);
                    Tensor::new(t.shape(), data)
                } else {
                    Ok(t.detached(false))
                }
            })
            .collect::<Result<_>>()?;
        Ok(f(&probe)?.item().f64())
    };

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let numeric = (eval(which, idx, h)? - eval(which, idx, -h)?) / (2.0 * h);
            let a = analytic[which][idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

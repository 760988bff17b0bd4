use super::{axis_split, Element, Tensor};
use crate::error::{Error, Result};

/// Variance floor shared by every normalization.
pub const NORM_EPS: f64 = 1e-5;

fn axis_ok<T: Element>(op: &'static str, t: &Tensor<T>, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Visits every 1-D lane along `axis` as (start index, stride).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let (outer, _, inner) = axis_split(shape, axis);
    let n = shape[axis];
    for o in 0..outer {
        for i in 0..inner {
            f(o * n * inner + i, inner);
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Max-subtracted softmax along `axis`; each lane sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        axis_ok("softmax", self, axis)?;
        let n = self.shape()[axis];
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for_each_lane(self.shape(), axis, |start, stride| {
            let max = (0..n)
                .map(|k| x[start + k * stride].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x[start + k * stride].f64() - max).exp();
                out[start + k * stride] = T::of(e);
                total += e;
            }
            for k in 0..n {
                let idx = start + k * stride;
                out[idx] = T::of(out[idx].f64() / total);
            }
        });
        let shape = self.shape().to_vec();
        Tensor::from_op("softmax", shape.clone(), out, &[self], move |ctx| {
            let (y, g) = (ctx.out, ctx.grad);
            let mut dx = vec![T::zero(); y.len()];
            for_each_lane(&shape, axis, |start, stride| {
                let dot: f64 = (0..n)
                    .map(|k| {
                        let i = start + k * stride;
                        y[i].f64() * g[i].f64()
                    })
                    .sum();
                for k in 0..n {
                    let i = start + k * stride;
                    dx[i] = T::of(y[i].f64() * (g[i].f64() - dot));
                }
            });
            vec![Some(dx)]
        })
    }

    /// Numerically stable `log(softmax(x))` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        axis_ok("log_softmax", self, axis)?;
        let n = self.shape()[axis];
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for_each_lane(self.shape(), axis, |start, stride| {
            let max = (0..n)
                .map(|k| x[start + k * stride].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..n)
                    .map(|k| (x[start + k * stride].f64() - max).exp())
                    .sum::<f64>()
                    .ln();
            for k in 0..n {
                let i = start + k * stride;
                out[i] = T::of(x[i].f64() - lse);
            }
        });
        let shape = self.shape().to_vec();
        Tensor::from_op("log_softmax", shape.clone(), out, &[self], move |ctx| {
            let (y, g) = (ctx.out, ctx.grad);
            let mut dx = vec![T::zero(); y.len()];
            for_each_lane(&shape, axis, |start, stride| {
                let gsum: f64 = (0..n).map(|k| g[start + k * stride].f64()).sum();
                for k in 0..n {
                    let i = start + k * stride;
                    dx[i] = T::of(g[i].f64() - y[i].f64().exp() * gsum);
                }
            });
            vec![Some(dx)]
        })
    }

    /// Standardizes each row of a matrix (mean 0, variance 1, no affine).
    /// Constant rows map to zeros.
    pub fn instance_norm(&self) -> Result<Tensor<T>> {
        match *self.shape() {
            [_, c] if c >= 2 => self.normalize("instance_norm", 1, None),
            ref s => Err(Error::shape(
                "instance_norm",
                format!("needs a matrix with at least 2 columns, got {s:?}"),
            )),
        }
    }

    /// Standardizes along `axis` then applies `gamma * x_hat + beta`, where
    /// `gamma` and `beta` have one entry per position of `axis`.
    pub fn layer_norm(&self, axis: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        axis_ok("layer_norm", self, axis)?;
        let n = self.shape()[axis];
        if n < 2 {
            return Err(Error::shape("layer_norm", "normalized axis needs at least 2 entries"));
        }
        if gamma.numel() != n || beta.numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine params have {} / {} entries, axis has {n}",
                    gamma.numel(),
                    beta.numel()
                ),
            ));
        }
        self.normalize("layer_norm", axis, Some((gamma, beta)))
    }

    fn normalize(
        &self,
        op: &'static str,
        axis: usize,
        affine: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<Tensor<T>> {
        let n = self.shape()[axis];
        let x = self.data();
        let len = x.len();
        let mut xhat = vec![0.0f64; len];
        let mut inv_std = Vec::new();
        for_each_lane(self.shape(), axis, |start, stride| {
            let mean = (0..n).map(|k| x[start + k * stride].f64()).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|k| (x[start + k * stride].f64() - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for k in 0..n {
                let i = start + k * stride;
                xhat[i] = (x[i].f64() - mean) * is;
            }
            inv_std.push(is);
        });
        let out: Vec<T> = match affine {
            None => xhat.iter().map(|&v| T::of(v)).collect(),
            Some((gamma, beta)) => {
                let (g, b) = (gamma.data(), beta.data());
                let mut out = vec![T::zero(); len];
                for_each_lane(self.shape(), axis, |start, stride| {
                    for k in 0..n {
                        let i = start + k * stride;
                        out[i] = T::of(xhat[i] * g[k].f64() + b[k].f64());
                    }
                });
                out
            }
        };
        let shape = self.shape().to_vec();
        let gamma = affine.map(|(g, _)| g.clone());
        let mut inputs = vec![self];
        if let Some((g, b)) = affine {
            inputs.push(g);
            inputs.push(b);
        }
        Tensor::from_op(op, shape.clone(), out, &inputs, move |ctx| {
            let grad = ctx.grad;
            // gradient w.r.t. x_hat
            let dxhat: Vec<f64> = match &gamma {
                None => grad.iter().map(|v| v.f64()).collect(),
                Some(gm) => {
                    let gd = gm.data();
                    let mut d = vec![0.0; len];
                    for_each_lane(&shape, axis, |start, stride| {
                        for k in 0..n {
                            let i = start + k * stride;
                            d[i] = grad[i].f64() * gd[k].f64();
                        }
                    });
                    d
                }
            };
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); len]);
            let mut lane = 0;
            let mut dgamma = vec![0.0f64; n];
            let mut dbeta = vec![0.0f64; n];
            for_each_lane(&shape, axis, |start, stride| {
                let is = inv_std[lane];
                lane += 1;
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for k in 0..n {
                    let i = start + k * stride;
                    mean_d += dxhat[i];
                    mean_dx += dxhat[i] * xhat[i];
                    dgamma[k] += grad[i].f64() * xhat[i];
                    dbeta[k] += grad[i].f64();
                }
                mean_d /= n as f64;
                mean_dx /= n as f64;
                if let Some(dx) = dx.as_mut() {
                    for k in 0..n {
                        let i = start + k * stride;
                        dx[i] = T::of(is * (dxhat[i] - mean_d - xhat[i] * mean_dx));
                    }
                }
            });
            let mut grads = vec![dx];
            if gamma.is_some() {
                grads.push(ctx.needs[1].then(|| dgamma.into_iter().map(T::of).collect()));
                grads.push(ctx.needs[2].then(|| dbeta.into_iter().map(T::of).collect()));
            }
            grads
        })
    }
}

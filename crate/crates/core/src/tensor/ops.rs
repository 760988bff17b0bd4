use super::{axis_split, numel, BackwardCtx, Element, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn expect_2d<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_axis<T: Element>(op: &'static str, t: &Tensor<T>, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn matmul_impl<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let (ar, ac) = expect_2d(op, a)?;
    let (br, bc) = expect_2d(op, b)?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(
            op,
            format!("inner dims disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), trans_a, b.data(), trans_b, T::zero(), &mut out);
    let (ad, bd) = (a.clone(), b.clone());
    Tensor::from_op(op, vec![m, n], out, &[a, b], move |ctx: &BackwardCtx<'_, T>| {
        let g = ctx.grad;
        let ga = ctx.needs[0].then(|| {
            let mut da = vec![T::zero(); m * k];
            if trans_a {
                // a stored k x m: dA = op(B) * dC^T
                T::gemm(k, n, m, bd.data(), trans_b, g, true, T::zero(), &mut da);
            } else {
                T::gemm(m, n, k, g, false, bd.data(), !trans_b, T::zero(), &mut da);
            }
            da
        });
        let gb = ctx.needs[1].then(|| {
            let mut db = vec![T::zero(); k * n];
            if trans_b {
                // b stored n x k: dB = dC^T * op(A)
                T::gemm(n, m, k, g, true, ad.data(), trans_a, T::zero(), &mut db);
            } else {
                T::gemm(k, m, n, ad.data(), !trans_a, g, false, T::zero(), &mut db);
            }
            db
        });
        vec![ga, gb]
    })
}

/// Concatenates tensors along `axis`; all other dims must agree.
pub fn concat<T: Element>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    check_axis("concat", first, axis)?;
    for p in parts {
        if p.ndim() != first.ndim()
            || p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for (p, &len) in parts.iter().zip(&lens) {
            let chunk = len * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let inputs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::from_op("concat", shape, out, &inputs, move |ctx| {
        let mut grads: Vec<Option<Vec<T>>> = lens
            .iter()
            .zip(ctx.needs)
            .map(|(&len, &need)| need.then(|| Vec::with_capacity(outer * len * inner)))
            .collect();
        for o in 0..outer {
            let mut offset = o * total * inner;
            for (g, &len) in grads.iter_mut().zip(&lens) {
                let chunk = len * inner;
                if let Some(g) = g {
                    g.extend_from_slice(&ctx.grad[offset..offset + chunk]);
                }
                offset += chunk;
            }
        }
        grads
    })
}

impl<T: Element> Tensor<T> {
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_impl("matmul", self, false, other, false)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_impl("matmul_tn", self, true, other, false)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_impl("matmul_nt", self, false, other, true)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = expect_2d("transpose", self)?;
        let src = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Tensor::from_op("transpose", vec![c, r], out, &[self], move |ctx| {
            let mut g = vec![T::zero(); r * c];
            for j in 0..c {
                for i in 0..r {
                    g[i * c + j] = ctx.grad[j * r + i];
                }
            }
            vec![Some(g)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Tensor::from_op("reshape", shape.to_vec(), self.data().to_vec(), &[self], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis("narrow", self, axis)?;
        let (outer, n, inner) = axis_split(self.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) out of axis length {n}", start + len),
            ));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let total = self.numel();
        Tensor::from_op("narrow", shape, out, &[self], move |ctx| {
            let mut g = vec![T::zero(); total];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                let src = &ctx.grad[o * len * inner..(o + 1) * len * inner];
                g[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(g)]
        })
    }

    /// Splits `axis` into equal chunks.
    pub fn chunk(&self, axis: usize, parts: usize) -> Result<Vec<Tensor<T>>> {
        check_axis("chunk", self, axis)?;
        let n = self.shape()[axis];
        if parts == 0 || n % parts != 0 {
            return Err(Error::shape(
                "chunk",
                format!("axis length {n} not divisible into {parts} parts"),
            ));
        }
        let len = n / parts;
        (0..parts).map(|p| self.narrow(axis, p * len, len)).collect()
    }

    fn zip_op(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Tensor<T>> {
        same_shape(op, self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(op, self.shape().to_vec(), out, &[self, other], move |ctx| {
            let n = ctx.grad.len();
            let mut ga = ctx.needs[0].then(|| Vec::with_capacity(n));
            let mut gb = ctx.needs[1].then(|| Vec::with_capacity(n));
            for i in 0..n {
                let (da, db) = df(a.data()[i], b.data()[i], ctx.grad[i]);
                if let Some(g) = ga.as_mut() {
                    g.push(da);
                }
                if let Some(g) = gb.as_mut() {
                    g.push(db);
                }
            }
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_op(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_op(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_op(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_op(
            other,
            "div",
            |a, b| a / b,
            |a, b, g| (g / b, -g * a / (b * b)),
        )
    }

    fn map_op(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(op, self.shape().to_vec(), out, &[self], move |ctx| {
            let g = x
                .data()
                .iter()
                .zip(ctx.grad)
                .map(|(&xi, &gi)| gi * df(xi, gi))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn scale(&self, s: f64) -> Result<Tensor<T>> {
        let s = T::of(s);
        self.map_op("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor<T>> {
        let s = T::of(s);
        self.map_op("add_scalar", move |x| x + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.map_op(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let c = T::of(SQRT_2_OVER_PI);
        let k = T::of(GELU_COEF);
        let half = T::of(0.5);
        let three = T::of(3.0);
        self.map_op(
            "gelu",
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
            },
        )
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|x| x.exp()).collect();
        Tensor::from_op("exp", self.shape().to_vec(), out, &[self], |ctx| {
            vec![Some(ctx.out.iter().zip(ctx.grad).map(|(&y, &g)| y * g).collect())]
        })
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Invalid("ln of a non-positive value".into()));
        }
        self.map_op("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    /// Adds `bias` (length = size of `axis`) to every slice along `axis`.
    pub fn add_bias(&self, bias: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        check_axis("add_bias", self, axis)?;
        let (outer, n, inner) = axis_split(self.shape(), axis);
        if bias.numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias has {} entries, axis {axis} has {n}", bias.numel()),
            ));
        }
        let mut out = self.data().to_vec();
        let b = bias.data();
        for o in 0..outer {
            for (c, &bc) in b.iter().enumerate() {
                let base = (o * n + c) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v = *v + bc);
            }
        }
        Tensor::from_op("add_bias", self.shape().to_vec(), out, &[self, bias], move |ctx| {
            let gx = ctx.needs[0].then(|| ctx.grad.to_vec());
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![T::zero(); n];
                for o in 0..outer {
                    for (c, slot) in gb.iter_mut().enumerate() {
                        let base = (o * n + c) * inner;
                        let s: f64 = ctx.grad[base..base + inner].iter().map(|v| v.f64()).sum();
                        *slot = *slot + T::of(s);
                    }
                }
                gb
            });
            vec![gx, gb]
        })
    }

    pub fn sum(&self) -> Result<Tensor<T>> {
        let s: f64 = self.data().iter().map(|v| v.f64()).sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![T::of(s)], &[self], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sums out `axis`; the result drops that dimension (a 1-D input gives shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("sum_axis", self, axis)?;
        let (outer, n, inner) = axis_split(self.shape(), axis);
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut acc = vec![0.0f64; outer * inner];
        let src = self.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    acc[o * inner + i] += src[base + i].f64();
                }
            }
        }
        let out = acc.into_iter().map(T::of).collect();
        let total = self.numel();
        Tensor::from_op("sum_axis", shape, out, &[self], move |ctx| {
            let mut g = vec![T::zero(); total];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    g[base..base + inner].copy_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        })
    }
}

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Spatial resampling modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    MaxPool,
    NearestUp,
    BilinearUp,
}

fn expect_chw<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected c x h x w, got {s:?}"))),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output range `[lo, hi)` along one axis whose taps at offset `kk` land inside `0..n`.
    #[inline]
    fn valid(&self, kk: usize, n: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = p.saturating_sub(kk).div_ceil(s).min(out);
        let hi = if n + p > kk { ((n + p - kk - 1) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Visits every in-bounds run of taps as (col-matrix start, input start, length);
    /// consecutive taps of a run step by 1 in the col matrix and by `stride` in the input.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ncols = self.cols();
        for ci in 0..self.c {
            for ky in 0..self.k {
                let (oy0, oy1) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.k {
                    let (ox0, ox1) = self.valid(kx, self.w, self.wo);
                    if ox0 == ox1 {
                        continue;
                    }
                    let row = (ci * self.k + ky) * self.k + kx;
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let ix = ox0 * self.stride + kx - self.pad;
                        f(row * ncols + oy * self.wo + ox0, (ci * self.h + iy) * self.w + ix, ox1 - ox0);
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let s = g.stride;
    g.for_each_run(|c0, x0, n| {
        if s == 1 {
            cols[c0..c0 + n].copy_from_slice(&x[x0..x0 + n]);
        } else {
            for (j, c) in cols[c0..c0 + n].iter_mut().enumerate() {
                *c = x[x0 + j * s];
            }
        }
    });
    cols
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    let s = g.stride;
    g.for_each_run(|c0, x0, n| {
        for (j, &c) in cols[c0..c0 + n].iter().enumerate() {
            let xi = x0 + j * s;
            x[xi] = x[xi] + c;
        }
    });
    x
}

/// 1-D linear interpolation table with the half-pixel (align_corners = false) mapping.
fn bilinear_table(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of a `c_in x h x w` input with `c_out x c_in x k x k`
    /// weights, plus an optional per-output-channel bias.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (c, h, w) = expect_chw("conv2d", self)?;
        let (c_out, k) = match *weight.shape() {
            [o, ci, k1, k2] if ci == c && k1 == k2 => (o, k1),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight {s:?} incompatible with input {:?}", self.shape()),
                ))
            }
        };
        if stride == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output size not integral for {h}x{w}, k={k}, stride={stride}, pad={pad}"),
            ));
        }
        if let Some(b) = bias {
            if b.numel() != c_out {
                return Err(Error::shape("conv2d", "bias length must equal output channels"));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let cols = im2col(&geom, self.data());
        let mut out = vec![T::zero(); c_out * ncols];
        if let Some(b) = bias {
            for (o, &bo) in b.data().iter().enumerate() {
                out[o * ncols..(o + 1) * ncols].fill(bo);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(c_out, rows, ncols, weight.data(), false, &cols, false, beta, &mut out);

        let wt = weight.clone();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            "conv2d",
            vec![c_out, geom.ho, geom.wo],
            out,
            &inputs,
            move |ctx| {
                let g = ctx.grad;
                let dx = ctx.needs[0].then(|| {
                    let mut dcols = vec![T::zero(); rows * ncols];
                    T::gemm(rows, c_out, ncols, wt.data(), true, g, false, T::zero(), &mut dcols);
                    col2im(&geom, &dcols)
                });
                let dw = ctx.needs[1].then(|| {
                    let mut dw = vec![T::zero(); c_out * rows];
                    T::gemm(c_out, ncols, rows, g, false, &cols, true, T::zero(), &mut dw);
                    dw
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(ctx.needs[2].then(|| {
                        (0..c_out)
                            .map(|o| {
                                T::of(g[o * ncols..(o + 1) * ncols].iter().map(|v| v.f64()).sum())
                            })
                            .collect()
                    }));
                }
                grads
            },
        )
    }

    pub fn resample(&self, factor: usize, mode: Resample) -> Result<Tensor<T>> {
        match mode {
            Resample::MaxPool => self.max_pool2d(factor),
            Resample::NearestUp => self.upsample_nearest(factor),
            Resample::BilinearUp => self.upsample_bilinear(factor),
        }
    }

    /// Non-overlapping `factor x factor` max pooling.
    pub fn max_pool2d(&self, factor: usize) -> Result<Tensor<T>> {
        let (c, h, w) = expect_chw("max_pool2d", self)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "max_pool2d",
                format!("{h}x{w} not divisible by {factor}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let x = self.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (ci * h + oy * factor) * w + ox * factor;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let i = (ci * h + oy * factor + dy) * w + ox * factor + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let n = self.numel();
        Tensor::from_op("max_pool2d", vec![c, ho, wo], out, &[self], move |ctx| {
            let mut dx = vec![T::zero(); n];
            for (&i, &g) in argmax.iter().zip(ctx.grad) {
                dx[i] = dx[i] + g;
            }
            vec![Some(dx)]
        })
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor<T>> {
        let (c, h, w) = expect_chw("upsample_nearest", self)?;
        if factor == 0 {
            return Err(Error::shape("upsample_nearest", "factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let x = self.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                let row = (ci * h + oy / factor) * w;
                out.extend((0..wo).map(|ox| x[row + ox / factor]));
            }
        }
        Tensor::from_op("upsample_nearest", vec![c, ho, wo], out, &[self], move |ctx| {
            let mut dx = vec![T::zero(); c * h * w];
            for ci in 0..c {
                for oy in 0..ho {
                    let row = (ci * h + oy / factor) * w;
                    let grow = (ci * ho + oy) * wo;
                    for ox in 0..wo {
                        dx[row + ox / factor] = dx[row + ox / factor] + ctx.grad[grow + ox];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Bilinear upsampling with half-pixel centers (align_corners = false).
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor<T>> {
        let (c, h, w) = expect_chw("upsample_bilinear", self)?;
        if factor == 0 {
            return Err(Error::shape("upsample_bilinear", "factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let ty = bilinear_table(h, factor);
        let tx = bilinear_table(w, factor);
        let x = self.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for &(y0, y1, ly) in &ty {
                for &(x0, x1, lx) in &tx {
                    let top = plane[y0 * w + x0].f64() * (1.0 - lx) + plane[y0 * w + x1].f64() * lx;
                    let bot = plane[y1 * w + x0].f64() * (1.0 - lx) + plane[y1 * w + x1].f64() * lx;
                    out.push(T::of(top * (1.0 - ly) + bot * ly));
                }
            }
        }
        Tensor::from_op("upsample_bilinear", vec![c, ho, wo], out, &[self], move |ctx| {
            let mut dx = vec![0.0f64; c * h * w];
            for ci in 0..c {
                let base = ci * h * w;
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let g = ctx.grad[(ci * ho + oy) * wo + ox].f64();
                        dx[base + y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                        dx[base + y0 * w + x1] += g * (1.0 - ly) * lx;
                        dx[base + y1 * w + x0] += g * ly * (1.0 - lx);
                        dx[base + y1 * w + x1] += g * ly * lx;
                    }
                }
            }
            vec![Some(dx.into_iter().map(T::of).collect())]
        })
    }
}

//! Small parameterized layers shared by the attention modules and the backbone.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Std of the truncated-normal init used for projections and embeddings.
pub const PROJ_INIT_STD: f64 = 0.02;

/// Dense map `y = W x + b` with `W: out x in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.trunc_normal(&format!("{name}.weight"), &[out_dim, in_dim], PROJ_INIT_STD)?;
        let bias = if bias {
            Some(init.zeros(&format!("{name}.bias"), &[out_dim])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Features along rows: `x` is `in x n`, result `out x n`.
    pub fn apply_cols<T: Element>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ps.get(self.weight).matmul(x)?;
        match self.bias {
            Some(b) => y.add_bias(ps.get(b), 0),
            None => Ok(y),
        }
    }

    /// Features along columns: `x` is `n x in`, result `n x out`.
    pub fn apply_rows<T: Element>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul_nt(ps.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(ps.get(b), 1),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-initialized square convolution with bias.
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = init.he_normal(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            c_in * kernel * kernel,
        )?;
        let bias = init.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<T: Element>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(init, name, c_in, c_out, 3, 1, 1)
    }

    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(ps.get(self.weight), Some(ps.get(self.bias)), self.stride, self.pad)
    }
}

/// Layer normalization along one axis with learnable scale/shift (init 1, 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.ones(&format!("{name}.gamma"), &[dim])?,
            beta: init.zeros(&format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward<T: Element>(&self, ps: &ParamStore<T>, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        x.layer_norm(axis, ps.get(self.gamma), ps.get(self.beta))
    }
}

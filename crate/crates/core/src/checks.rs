//! Numeric gradient battery over every differentiable op and attention module,
//! run in f64 at toy shapes (C = 8, d = 16, N_H = 2, N_L = 2).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dat::{cfa_forward, dat_forward, mlp_block, ssa_forward, CfaParams, Dat, DatConfig, DatMode, MlpParams, SsaParams};
use crate::dra::{dra_forward, fuse_decoder, DraParams, DraVariant};
use crate::embedding::{concat_tokens, ConcatAxis, PatchEmbed, Reconstruct, ScaleSpec, TokenSeq};
use crate::error::Result;
use crate::nn::Conv;
use crate::params::{Init, ParamStore};
use crate::tensor::{concat, grad_check, Tensor};
use crate::train::combined_loss;

/// Tolerance for ops that are linear in each input.
pub const LINEAR_TOL: f64 = 1e-4;
pub const NONLINEAR_TOL: f64 = 1e-3;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

pub const TOY_C: usize = 8;
pub const TOY_D: usize = 16;
pub const TOY_HEADS: usize = 2;
pub const TOY_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Scalars perturbed.
    pub scalars: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

struct Fixture {
    rng: ChaCha8Rng,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }

    fn rand(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.uniform(shape, -1.0, 1.0)
    }

    /// Reduces `out` to a scalar with fixed random weights so no direction of the
    /// output is invisible to the check (a plain sum would be for softmax).
    fn weights_for(&mut self, out: &Tensor<f64>) -> Tensor<f64> {
        self.rand(out.shape())
    }

    fn op<F>(&mut self, name: &str, tol: f64, inputs: Vec<Tensor<f64>>, f: F) -> Result<GradCheck>
    where
        F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let r = self.weights_for(&f(&inputs)?);
        let err = grad_check(|v| f(v)?.mul(&r)?.sum(), &inputs, STEP)?;
        Ok(GradCheck {
            name: name.into(),
            max_rel_err: err,
            tolerance: tol,
            scalars: inputs.iter().map(|t| t.numel()).sum(),
        })
    }

    /// Checks gradients with respect to every parameter of `store` and every input.
    fn module<F>(&mut self, name: &str, store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, f: F) -> Result<GradCheck>
    where
        F: Fn(&ParamStore<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let ids: Vec<_> = store.ids().collect();
        let np = ids.len();
        let mut all: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.detached(false)).collect();
        all.extend(inputs);
        let run = |v: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let mut ps = store.frozen();
            for (&id, t) in ids.iter().zip(v) {
                ps.set_tensor(id, t)?;
            }
            f(&ps, &v[np..])
        };
        let r = self.weights_for(&run(&all)?);
        let err = grad_check(|v| run(v)?.mul(&r)?.sum(), &all, STEP)?;
        Ok(GradCheck {
            name: name.into(),
            max_rel_err: err,
            tolerance: NONLINEAR_TOL,
            scalars: all.iter().map(|t| t.numel()).sum(),
        })
    }
}

fn toy_config() -> DatConfig {
    DatConfig {
        embed_dim: TOY_C,
        tokens: TOY_D,
        heads: TOY_HEADS,
        layers: TOY_LAYERS,
        mlp_ratio: 4,
        cfa_heads: 1,
    }
}

fn seqs(fx: &mut Fixture) -> Vec<Tensor<f64>> {
    (0..4).map(|_| fx.rand(&[TOY_C, TOY_D])).collect()
}

fn as_levels(v: &[Tensor<f64>]) -> Result<Vec<TokenSeq<f64>>> {
    v.iter().enumerate().map(|(i, t)| TokenSeq::level(i + 1, t.clone())).collect()
}

/// One check per tensor op.
pub fn op_checks() -> Result<Vec<GradCheck>> {
    let mut fx = Fixture::new(11);
    let a = fx.rand(&[3, 4]);
    let b = fx.rand(&[4, 5]);
    let c = fx.rand(&[3, 4]);
    let pos = fx.uniform(&[3, 4], 0.5, 2.0);
    let img = fx.rand(&[2, 4, 6]);
    let gamma = fx.rand(&[4]);
    let beta = fx.rand(&[4]);
    let mut v = Vec::new();
    let l = LINEAR_TOL;
    let nl = NONLINEAR_TOL;
    v.push(fx.op("matmul", l, vec![a.clone(), b.clone()], |x| x[0].matmul(&x[1]))?);
    v.push(fx.op("matmul_tn", l, vec![a.clone(), c.clone()], |x| x[0].matmul_tn(&x[1]))?);
    v.push(fx.op("matmul_nt", l, vec![a.clone(), c.clone()], |x| x[0].matmul_nt(&x[1]))?);
    v.push(fx.op("transpose", l, vec![a.clone()], |x| x[0].transpose())?);
    v.push(fx.op("reshape", l, vec![a.clone()], |x| x[0].reshape(&[2, 6]))?);
    v.push(fx.op("narrow", l, vec![b.clone()], |x| x[0].narrow(1, 1, 3))?);
    v.push(fx.op("chunk", l, vec![a.clone()], |x| {
        let p = x[0].chunk(1, 2)?;
        p[0].mul(&p[0])?.add(&p[1])
    })?);
    v.push(fx.op("concat", l, vec![a.clone(), c.clone()], |x| concat(&[x[0].clone(), x[1].clone()], 1))?);
    v.push(fx.op("add", l, vec![a.clone(), c.clone()], |x| x[0].add(&x[1]))?);
    v.push(fx.op("sub", l, vec![a.clone(), c.clone()], |x| x[0].sub(&x[1]))?);
    v.push(fx.op("mul", nl, vec![a.clone(), c.clone()], |x| x[0].mul(&x[1]))?);
    v.push(fx.op("div", nl, vec![a.clone(), pos.clone()], |x| x[0].div(&x[1]))?);
    v.push(fx.op("scale", l, vec![a.clone()], |x| x[0].scale(-2.5))?);
    v.push(fx.op("add_scalar", l, vec![a.clone()], |x| x[0].add_scalar(0.75))?);
    v.push(fx.op("neg", l, vec![a.clone()], |x| x[0].neg())?);
    v.push(fx.op("relu", nl, vec![a.clone()], |x| x[0].relu())?);
    v.push(fx.op("gelu", nl, vec![a.clone()], |x| x[0].gelu())?);
    v.push(fx.op("exp", nl, vec![a.clone()], |x| x[0].exp())?);
    v.push(fx.op("ln", nl, vec![pos.clone()], |x| x[0].ln())?);
    v.push(fx.op("add_bias", l, vec![a.clone(), gamma.clone()], |x| x[0].add_bias(&x[1], 1))?);
    v.push(fx.op("sum", l, vec![a.clone()], |x| x[0].sum())?);
    v.push(fx.op("mean", l, vec![a.clone()], |x| x[0].mean())?);
    v.push(fx.op("sum_axis", l, vec![a.clone()], |x| x[0].sum_axis(0))?);
    v.push(fx.op("softmax", nl, vec![a.clone()], |x| x[0].softmax(1))?);
    v.push(fx.op("log_softmax", nl, vec![a.clone()], |x| x[0].log_softmax(0))?);
    v.push(fx.op("instance_norm", nl, vec![a.clone()], |x| x[0].instance_norm())?);
    v.push(fx.op("layer_norm", nl, vec![a.clone(), gamma, beta], |x| x[0].layer_norm(1, &x[1], &x[2]))?);
    let w = fx.rand(&[3, 2, 3, 3]);
    let bias = fx.rand(&[3]);
    v.push(fx.op("conv2d", l, vec![img.clone(), w, bias], |x| x[0].conv2d(&x[1], Some(&x[2]), 1, 1))?);
    let wp = fx.rand(&[3, 2, 2, 2]);
    v.push(fx.op("conv2d_strided", l, vec![img.clone(), wp], |x| x[0].conv2d(&x[1], None, 2, 0))?);
    v.push(fx.op("max_pool2d", nl, vec![img.clone()], |x| x[0].max_pool2d(2))?);
    v.push(fx.op("upsample_nearest", l, vec![img.clone()], |x| x[0].upsample_nearest(2))?);
    v.push(fx.op("upsample_bilinear", l, vec![img], |x| x[0].upsample_bilinear(2))?);
    let logits = fx.rand(&[3, 4, 4]);
    let target: Vec<u8> = (0..16).map(|i| (i * 7 % 3) as u8).collect();
    v.push(fx.op("combined_loss", nl, vec![logits], move |x| combined_loss(&x[0], &target, 0.5, 0.5))?);
    Ok(v)
}

/// Checks of the attention modules and the composed transformer.
pub fn module_checks() -> Result<Vec<GradCheck>> {
    let mut fx = Fixture::new(23);
    let cfg = toy_config();
    let mut v = Vec::new();

    let mut store = ParamStore::new();
    let cfa = CfaParams::new(&mut Init::new(&mut store, &mut fx.rng.clone()), "cfa", &cfg)?;
    let inputs = seqs(&mut fx);
    v.push(fx.module("cfa_forward", &store, inputs, |ps, x| {
        let fused = concat_tokens(&as_levels(x)?, ConcatAxis::Channel)?;
        Ok(cfa_forward(&fused, &cfa, 1, ps)?.fused.tokens)
    })?);

    let mut store = ParamStore::new();
    let ssa = SsaParams::new(&mut Init::new(&mut store, &mut fx.rng.clone()), "ssa", &cfg)?;
    let inputs = seqs(&mut fx);
    v.push(fx.module("ssa_forward", &store, inputs, |ps, x| {
        let q = as_levels(x)?;
        let kv = concat_tokens(&q, ConcatAxis::Patch)?;
        let out = ssa_forward(&q, &kv, &ssa, TOY_HEADS, ps)?;
        concat(&out.outputs.into_iter().map(|s| s.tokens).collect::<Vec<_>>(), 1)
    })?);

    let mut store = ParamStore::new();
    let mlp = MlpParams::new(&mut Init::new(&mut store, &mut fx.rng.clone()), "mlp", &cfg)?;
    let inputs = vec![fx.rand(&[TOY_C, TOY_D]), fx.rand(&[TOY_C, TOY_D])];
    v.push(fx.module("mlp_block", &store, inputs, |ps, x| {
        let q = TokenSeq::level(1, x[0].clone())?;
        let o = TokenSeq::level(1, x[1].clone())?;
        Ok(mlp_block(&q, &o, &mlp, ps)?.tokens)
    })?);

    // decoder feature 4 x 16 x 16 with 4 x 4 patches gives d = 16 tokens
    let spec = ScaleSpec::new(1, 16, 16, 4, 4)?;
    for (name, variant) in [("dra_forward_channel", DraVariant::Channel), ("dra_forward_spatial", DraVariant::Spatial)] {
        let mut store = ParamStore::new();
        let dra = DraParams::new(&mut Init::new(&mut store, &mut fx.rng.clone()), "dra", spec, TOY_C, true)?;
        let inputs = vec![fx.rand(&[TOY_C, TOY_D]), fx.rand(&[4, 16, 16])];
        v.push(fx.module(name, &store, inputs, |ps, x| {
            let o = TokenSeq::level(1, x[0].clone())?;
            Ok(dra_forward(&o, &x[1], &dra, variant, ps)?.recalibrated.tokens)
        })?);
    }

    let mut store = ParamStore::new();
    let (embed, recon, merge) = {
        let mut rng = fx.rng.clone();
        let mut init = Init::new(&mut store, &mut rng);
        (
            PatchEmbed::new(&mut init, "embed", spec, TOY_C, true)?,
            Reconstruct::new(&mut init, "recon", spec, TOY_C, 4)?,
            Conv::same3(&mut init, "merge", 8, 4)?,
        )
    };
    let inputs = vec![fx.rand(&[4, 16, 16]), fx.rand(&[4, 16, 16])];
    v.push(fx.module("tokenize_fuse_decoder", &store, inputs, |ps, x| {
        let t = embed.tokenize(ps, &x[0])?;
        fuse_decoder(&t, &x[1], &recon, &merge, ps)
    })?);

    for (name, mode) in [("dat_forward", DatMode::CfaThenSsa), ("dat_forward_ssa_first", DatMode::SsaThenCfa)] {
        let mut store = ParamStore::new();
        let dat = Dat::new(&mut Init::new(&mut store, &mut fx.rng.clone()), "dat", cfg, mode)?;
        let inputs = seqs(&mut fx);
        v.push(fx.module(name, &store, inputs, |ps, x| {
            let out = dat_forward(&as_levels(x)?, &dat, ps)?;
            concat(&out.outputs.into_iter().map(|s| s.tokens).collect::<Vec<_>>(), 1)
        })?);
    }
    Ok(v)
}

pub fn gradcheck_battery() -> Result<Vec<GradCheck>> {
    let mut v = op_checks()?;
    v.extend(module_checks()?);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_checks().unwrap() {
            assert!(c.passed(), "{} rel err {:e} (tol {:e})", c.name, c.max_rel_err, c.tolerance);
        }
    }

    #[test]
    fn every_module_passes() {
        let checks = module_checks().unwrap();
        assert_eq!(checks.len(), 8);
        for c in checks {
            assert!(c.passed(), "{} rel err {:e} (tol {:e})", c.name, c.max_rel_err, c.tolerance);
        }
    }

    #[test]
    fn detached_functions_are_rejected() {
        // a function computed outside the graph has no analytic gradient to compare
        let x = Tensor::<f64>::from_f64(&[3], &[0.3, -0.2, 0.9]).unwrap();
        let r = grad_check(|v| Tensor::from_f64(&[1], &[v[0].data().iter().map(|a| a * a).sum()]), &[x], STEP);
        assert!(r.is_err());
    }
}

//! Decoder-guided recalibration attention.
//!
//! The decoder feature `D_i` of level `i` is tokenized with the encoder's
//! patch geometry for that level and used as the query against the DAT output
//! `O_i` (keys and values). The channel variant attends over channels
//! (`C x C` map), the spatial variant over patches (`d x d` map). Either way
//! the result keeps the `C x d` shape of `O_i`, is reconstructed onto the
//! decoder grid and fused with `D_i` by concatenation and a 3x3 convolution.

use serde::{Deserialize, Serialize};

use crate::dat::attention_weights;
use crate::embedding::{PatchEmbed, Reconstruct, ScaleSpec, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{Conv, Linear};
use crate::params::{Init, ParamStore};
use crate::tensor::{concat, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraVariant {
    Channel,
    Spatial,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DraParams {
    /// Tokenizes the decoder feature map; same patch grid as the encoder level.
    pub decoder_embed: PatchEmbed,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl DraParams {
    /// `spec` describes the decoder feature (its channel count is the decoder width).
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        spec: ScaleSpec,
        embed_dim: usize,
        positional: bool,
    ) -> Result<Self> {
        let d = spec.tokens();
        Ok(Self {
            decoder_embed: PatchEmbed::new(init, &format!("{name}.embed"), spec, embed_dim, positional)?,
            wq: Linear::new(init, &format!("{name}.wq"), d, d, false)?,
            wk: Linear::new(init, &format!("{name}.wk"), d, d, false)?,
            wv: Linear::new(init, &format!("{name}.wv"), d, d, false)?,
        })
    }
}

pub struct DraOutput<T: Element> {
    pub recalibrated: TokenSeq<T>,
    /// `C x C` (channel) or `d x d` (spatial), row-stochastic.
    pub attention: Tensor<T>,
}

pub fn dra_forward<T: Element>(
    o_i: &TokenSeq<T>,
    d_i: &Tensor<T>,
    params: &DraParams,
    variant: DraVariant,
    ps: &ParamStore<T>,
) -> Result<DraOutput<T>> {
    let spec = params.decoder_embed.spec;
    if d_i.shape() != [spec.in_channels, spec.height, spec.width] {
        return Err(Error::shape(
            "dra_forward",
            format!(
                "decoder feature {:?} does not match level {} ({:?})",
                d_i.shape(),
                spec.level,
                [spec.in_channels, spec.height, spec.width]
            ),
        ));
    }
    let t_d = params.decoder_embed.tokenize(ps, d_i)?;
    if t_d.shape() != o_i.shape() {
        return Err(Error::shape(
            "dra_forward",
            format!("decoder tokens {:?} vs DAT tokens {:?}", t_d.shape(), o_i.shape()),
        ));
    }
    let q = params.wq.apply_rows(ps, &t_d.tokens)?;
    let k = params.wk.apply_rows(ps, &o_i.tokens)?;
    let v = params.wv.apply_rows(ps, &o_i.tokens)?;
    let (out, attention) = match variant {
        DraVariant::Channel => {
            let m = attention_weights(&q.matmul_nt(&k)?)?;
            (m.matmul(&v)?, m)
        }
        DraVariant::Spatial => {
            let m = attention_weights(&q.matmul_tn(&k)?)?;
            (v.matmul_nt(&m)?, m)
        }
    };
    Ok(DraOutput {
        recalibrated: TokenSeq {
            tokens: out,
            scale: o_i.scale,
            axis: None,
        },
        attention,
    })
}

/// `relu(conv3x3(concat_c(detokenize(O_hat_i), D_i)))`, restoring the decoder width.
pub fn fuse_decoder<T: Element>(
    o_hat: &TokenSeq<T>,
    d_i: &Tensor<T>,
    recon: &Reconstruct,
    merge: &Conv,
    ps: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let skip = recon.detokenize(ps, o_hat)?;
    if skip.shape()[1..] != d_i.shape()[1..] {
        return Err(Error::shape(
            "fuse_decoder",
            format!("reconstructed {:?} vs decoder {:?}", skip.shape(), d_i.shape()),
        ));
    }
    merge.forward(ps, &concat(&[skip, d_i.clone()], 0)?)?.relu()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::scale_specs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore<f64>, DraParams, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = scale_specs(32, 32, 8, [4, 8, 8, 8]).unwrap()[1];
        let p = DraParams::new(&mut Init::new(&mut store, &mut rng), "dra", spec, 8, true).unwrap();
        (store, p, rng)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_for_both_variants() {
        let (store, p, mut rng) = setup(1);
        let o = TokenSeq::level(2, rand_tensor(&mut rng, &[8, 16])).unwrap();
        let d = rand_tensor(&mut rng, &[8, 16, 16]);
        let c = dra_forward(&o, &d, &p, DraVariant::Channel, &store).unwrap();
        let s = dra_forward(&o, &d, &p, DraVariant::Spatial, &store).unwrap();
        assert_eq!(c.attention.shape(), &[8, 8]);
        assert_eq!(s.attention.shape(), &[16, 16]);
        assert_eq!(c.recalibrated.shape(), (8, 16));
        assert_eq!(s.recalibrated.shape(), (8, 16));
        let diff = c
            .recalibrated
            .tokens
            .data()
            .iter()
            .zip(s.recalibrated.tokens.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6);
        let bad = rand_tensor(&mut rng, &[8, 32, 32]);
        assert!(dra_forward(&o, &bad, &p, DraVariant::Channel, &store).is_err());
    }

    #[test]
    fn zero_query_gives_channel_mean() {
        let (mut store, p, mut rng) = setup(2);
        store.set(p.wq.weight, vec![0.0; 16 * 16]).unwrap();
        let eye: Vec<f64> = (0..256).map(|i| if i / 16 == i % 16 { 1.0 } else { 0.0 }).collect();
        store.set(p.wv.weight, eye).unwrap();
        let o = TokenSeq::level(2, rand_tensor(&mut rng, &[8, 16])).unwrap();
        let d = Tensor::zeros(&[8, 16, 16]);
        let out = dra_forward(&o, &d, &p, DraVariant::Channel, &store).unwrap();
        assert!(out.attention.data().iter().all(|&v| (v - 0.125).abs() < 1e-12));
        let x = o.tokens.data();
        for j in 0..16 {
            let mean = (0..8).map(|r| x[r * 16 + j]).sum::<f64>() / 8.0;
            for r in 0..8 {
                assert!((out.recalibrated.tokens.data()[r * 16 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_ignores_tokens_when_reconstruction_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = scale_specs(32, 32, 8, [4, 8, 8, 8]).unwrap()[0];
        let mut init = Init::new(&mut store, &mut rng);
        let recon = Reconstruct::new(&mut init, "rec", spec, 8, 4).unwrap();
        let merge = Conv::same3(&mut init, "merge", 8, 4).unwrap();
        store.set(recon.conv.weight, vec![0.0; 4 * 8 * 9]).unwrap();
        let d = rand_tensor(&mut rng, &[4, 32, 32]);
        let a = TokenSeq::level(1, rand_tensor(&mut rng, &[8, 16])).unwrap();
        let b = TokenSeq::level(1, rand_tensor(&mut rng, &[8, 16])).unwrap();
        let fa = fuse_decoder(&a, &d, &recon, &merge, &store).unwrap();
        let fb = fuse_decoder(&b, &d, &recon, &merge, &store).unwrap();
        assert_eq!(fa.shape(), &[4, 32, 32]);
        assert_eq!(fa.data(), fb.data());
    }

    #[test]
    fn fuse_gradients_reach_both_inputs() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = scale_specs(32, 32, 8, [4, 8, 8, 8]).unwrap()[0];
        let mut init = Init::new(&mut store, &mut rng);
        let recon = Reconstruct::new(&mut init, "rec", spec, 8, 4).unwrap();
        let merge = Conv::same3(&mut init, "merge", 8, 4).unwrap();
        let d = rand_tensor(&mut rng, &[4, 32, 32]).detached(true);
        let o = TokenSeq::level(1, rand_tensor(&mut rng, &[8, 16]).detached(true)).unwrap();
        fuse_decoder(&o, &d, &recon, &merge, &store)
            .unwrap()
            .sum()
            .unwrap()
            .backward()
            .unwrap();
        assert!(o.tokens.grad_vec().unwrap().iter().any(|&g| g != 0.0));
        assert!(d.grad_vec().unwrap().iter().any(|&g| g != 0.0));
    }
}

//! Dual attention transformer over multi-scale tokens.
//!
//! One layer runs, per scale `i`:
//!
//! 1. channel-wise fusion attention (CFA) on the channel-stacked sequence
//!    `T_sigma` (`4C x d`): `M = softmax(IN(Q K^T))` is `4C x 4C` and the output
//!    is `M V`;
//! 2. spatial-wise selection attention (SSA): each scale's tokens query the
//!    patch-stacked sequence (`C x 4d`), per head `M_i = softmax(IN(Q_i^T K))`
//!    is `d x 4d` and the head output is `V M_i^T`;
//! 3. `O_i = O_ssa_i + MLP(LN(Q_i + O_ssa_i))` where `Q_i` are the tokens that
//!    queried SSA.
//!
//! CFA projections act along the token axis (`d -> d` per channel row), SSA
//! projections along the channel axis (`C -> C` per token). Attention logits
//! are row-standardized instead of being scaled by `1/sqrt(dim)`.

use serde::{Deserialize, Serialize};

use crate::embedding::{concat_tokens, split_tokens, ConcatAxis, TokenSeq, NUM_SCALES};
use crate::error::{Error, Result, ResultExt};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::tensor::{concat, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatConfig {
    /// Token channels `C` per scale.
    pub embed_dim: usize,
    /// Tokens per scale `d`.
    pub tokens: usize,
    /// SSA heads `N_H`.
    pub heads: usize,
    /// Stacked layers `N_L`.
    pub layers: usize,
    pub mlp_ratio: usize,
    /// CFA heads; the token axis is split between them.
    pub cfa_heads: usize,
}

impl DatConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.embed_dim == 0 || self.tokens == 0 {
            problems.push("embed_dim and tokens must be positive".to_string());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            problems.push(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.layers == 0 {
            problems.push("layers must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            problems.push("mlp_ratio must be >= 1".into());
        }
        if self.cfa_heads == 0 || self.tokens % self.cfa_heads != 0 {
            problems.push(format!(
                "tokens {} not divisible by cfa_heads {}",
                self.tokens, self.cfa_heads
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn fused_channels(&self) -> usize {
        NUM_SCALES * self.embed_dim
    }

    pub fn fused_tokens(&self) -> usize {
        NUM_SCALES * self.tokens
    }
}

/// Which attention stages a layer runs, and in what order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatMode {
    CfaOnly,
    SsaOnly,
    CfaThenSsa,
    SsaThenCfa,
}

impl DatMode {
    pub fn has_cfa(self) -> bool {
        !matches!(self, DatMode::SsaOnly)
    }

    pub fn has_ssa(self) -> bool {
        !matches!(self, DatMode::CfaOnly)
    }

    fn stages(self) -> &'static [Stage] {
        match self {
            DatMode::CfaOnly => &[Stage::Cfa],
            DatMode::SsaOnly => &[Stage::Ssa],
            DatMode::CfaThenSsa => &[Stage::Cfa, Stage::Ssa],
            DatMode::SsaThenCfa => &[Stage::Ssa, Stage::Cfa],
        }
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Cfa,
    Ssa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    Cfa,
    Ssa,
    DraChannel,
    DraSpatial,
}

/// A row-stochastic attention matrix captured during forward.
#[derive(Debug, Clone)]
pub struct AttentionMap<T: Element> {
    pub kind: AttnKind,
    pub layer: usize,
    /// 1-based scale, absent for the fused CFA map.
    pub scale: Option<usize>,
    pub head: usize,
    pub matrix: Tensor<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfaParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsaParams {
    /// One query projection per scale.
    pub wq: Vec<Linear>,
    pub wk: Linear,
    pub wv: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatLayer {
    /// Per-scale pre-norms ahead of CFA.
    pub cfa_norms: Vec<LayerNorm>,
    pub cfa: Option<CfaParams>,
    /// Per-scale pre-norms ahead of SSA.
    pub ssa_norms: Vec<LayerNorm>,
    pub ssa: Option<SsaParams>,
    pub mlps: Vec<MlpParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dat {
    pub config: DatConfig,
    pub mode: DatMode,
    pub layers: Vec<DatLayer>,
}

impl CfaParams {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, cfg: &DatConfig) -> Result<Self> {
        let d = cfg.tokens;
        Ok(Self {
            wq: Linear::new(init, &format!("{name}.wq"), d, d, false)?,
            wk: Linear::new(init, &format!("{name}.wk"), d, d, false)?,
            wv: Linear::new(init, &format!("{name}.wv"), d, d, false)?,
        })
    }
}

impl SsaParams {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, cfg: &DatConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let wq = (1..=NUM_SCALES)
            .map(|i| Linear::new(init, &format!("{name}.wq{i}"), c, c, false))
            .collect::<Result<_>>()?;
        Ok(Self {
            wq,
            wk: Linear::new(init, &format!("{name}.wk"), c, c, false)?,
            wv: Linear::new(init, &format!("{name}.wv"), c, c, false)?,
        })
    }
}

impl MlpParams {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, cfg: &DatConfig) -> Result<Self> {
        let c = cfg.embed_dim;
        let hidden = c * cfg.mlp_ratio;
        Ok(Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), c)?,
            fc1: Linear::new(init, &format!("{name}.fc1"), c, hidden, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, c, true)?,
        })
    }
}

impl Dat {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, config: DatConfig, mode: DatMode) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let norms = |init: &mut Init<'_, T>, prefix: &str| -> Result<Vec<LayerNorm>> {
            (1..=NUM_SCALES)
                .map(|i| LayerNorm::new(init, &format!("{prefix}{i}"), c))
                .collect()
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{name}.layer{l}");
            let (cfa_norms, cfa) = if mode.has_cfa() {
                (
                    norms(init, &format!("{p}.cfa_norm"))?,
                    Some(CfaParams::new(init, &format!("{p}.cfa"), &config)?),
                )
            } else {
                (Vec::new(), None)
            };
            let (ssa_norms, ssa) = if mode.has_ssa() {
                (
                    norms(init, &format!("{p}.ssa_norm"))?,
                    Some(SsaParams::new(init, &format!("{p}.ssa"), &config)?),
                )
            } else {
                (Vec::new(), None)
            };
            let mlps = (1..=NUM_SCALES)
                .map(|i| MlpParams::new(init, &format!("{p}.mlp{i}"), &config))
                .collect::<Result<_>>()?;
            layers.push(DatLayer {
                cfa_norms,
                cfa,
                ssa_norms,
                ssa,
                mlps,
            });
        }
        Ok(Self {
            config,
            mode,
            layers,
        })
    }
}

fn check_finite<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `softmax(IN(logits))` along rows.
pub(crate) fn attention_weights<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.instance_norm()?.softmax(1)
}

pub struct CfaOutput<T: Element> {
    /// `4C x d`, channel-stacked like the input.
    pub fused: TokenSeq<T>,
    /// One `4C x 4C` map per CFA head.
    pub attention: Vec<Tensor<T>>,
}

/// Channel-wise fusion attention on the channel-stacked sequence.
pub fn cfa_forward<T: Element>(
    t_sigma: &TokenSeq<T>,
    params: &CfaParams,
    heads: usize,
    ps: &ParamStore<T>,
) -> Result<CfaOutput<T>> {
    if t_sigma.axis != Some(ConcatAxis::Channel) {
        return Err(Error::shape("cfa_forward", "input must be channel-concatenated"));
    }
    let x = &t_sigma.tokens;
    let d = t_sigma.len();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("cfa_forward", format!("{d} tokens not divisible into {heads} heads")));
    }
    let q = params.wq.apply_rows(ps, x)?;
    let k = params.wk.apply_rows(ps, x)?;
    let v = params.wv.apply_rows(ps, x)?;
    let width = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (
                q.narrow(1, h * width, width)?,
                k.narrow(1, h * width, width)?,
                v.narrow(1, h * width, width)?,
            )
        };
        let m = attention_weights(&qh.matmul_nt(&kh)?)?;
        outs.push(m.matmul(&vh)?);
        attention.push(m);
    }
    let out = if heads == 1 {
        outs.pop().unwrap()
    } else {
        concat(&outs, 1)?
    };
    check_finite(&out, "cfa_forward")?;
    Ok(CfaOutput {
        fused: TokenSeq {
            tokens: out,
            scale: t_sigma.scale,
            axis: t_sigma.axis,
        },
        attention,
    })
}

pub struct SsaOutput<T: Element> {
    /// `O_ssa_i`, one `C x d` sequence per scale.
    pub outputs: Vec<TokenSeq<T>>,
    /// `[scale][head]`, each `d x 4d`.
    pub attention: Vec<Vec<Tensor<T>>>,
}

/// Spatial-wise selection attention: scale `i` queries the patch-stacked sequence.
pub fn ssa_forward<T: Element>(
    t_hats: &[TokenSeq<T>],
    t_hat_sigma: &TokenSeq<T>,
    params: &SsaParams,
    heads: usize,
    ps: &ParamStore<T>,
) -> Result<SsaOutput<T>> {
    if t_hats.len() != NUM_SCALES || params.wq.len() != NUM_SCALES {
        return Err(Error::shape("ssa_forward", "expected four query sequences"));
    }
    if t_hat_sigma.axis != Some(ConcatAxis::Patch) {
        return Err(Error::shape("ssa_forward", "key/value must be patch-concatenated"));
    }
    let c = t_hat_sigma.channels();
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape("ssa_forward", format!("{c} channels not divisible into {heads} heads")));
    }
    let k = params.wk.apply_cols(ps, &t_hat_sigma.tokens)?;
    let v = params.wv.apply_cols(ps, &t_hat_sigma.tokens)?;
    let width = c / heads;
    let kv_heads: Vec<(Tensor<T>, Tensor<T>)> = if heads == 1 {
        vec![(k, v)]
    } else {
        (0..heads)
            .map(|h| Ok((k.narrow(0, h * width, width)?, v.narrow(0, h * width, width)?)))
            .collect::<Result<_>>()?
    };
    let mut outputs = Vec::with_capacity(NUM_SCALES);
    let mut attention = Vec::with_capacity(NUM_SCALES);
    for (i, (t_hat, wq)) in t_hats.iter().zip(&params.wq).enumerate() {
        if t_hat.channels() != c {
            return Err(Error::shape("ssa_forward", "query/key channel mismatch"));
        }
        let q = wq.apply_cols(ps, &t_hat.tokens)?;
        let mut thetas = Vec::with_capacity(heads);
        let mut maps = Vec::with_capacity(heads);
        for (h, (kh, vh)) in kv_heads.iter().enumerate() {
            let qh = if heads == 1 { q.clone() } else { q.narrow(0, h * width, width)? };
            let m = attention_weights(&qh.matmul_tn(kh)?)?;
            thetas.push(vh.matmul_nt(&m)?);
            maps.push(m);
        }
        let o = if heads == 1 {
            thetas.pop().unwrap()
        } else {
            concat(&thetas, 0)?
        };
        check_finite(&o, "ssa_forward")?;
        outputs.push(TokenSeq::level(i + 1, o)?);
        attention.push(maps);
    }
    Ok(SsaOutput { outputs, attention })
}

/// `O = O_ssa + MLP(LN(Q + O_ssa))`, MLP = linear, GELU, linear per token.
pub fn mlp_block<T: Element>(
    query: &TokenSeq<T>,
    o_ssa: &TokenSeq<T>,
    params: &MlpParams,
    ps: &ParamStore<T>,
) -> Result<TokenSeq<T>> {
    if query.shape() != o_ssa.shape() {
        return Err(Error::shape(
            "mlp_block",
            format!("{:?} vs {:?}", query.shape(), o_ssa.shape()),
        ));
    }
    let s = query.tokens.add(&o_ssa.tokens)?;
    let n = params.norm.forward(ps, &s, 0)?;
    let h = params.fc1.apply_cols(ps, &n)?.gelu()?;
    let m = params.fc2.apply_cols(ps, &h)?;
    Ok(TokenSeq {
        tokens: o_ssa.tokens.add(&m)?,
        scale: o_ssa.scale,
        axis: None,
    })
}

fn normalize_scales<T: Element>(
    seqs: &[TokenSeq<T>],
    norms: &[LayerNorm],
    ps: &ParamStore<T>,
) -> Result<Vec<TokenSeq<T>>> {
    seqs.iter()
        .zip(norms)
        .map(|(s, n)| {
            Ok(TokenSeq {
                tokens: n.forward(ps, &s.tokens, 0)?,
                scale: s.scale,
                axis: None,
            })
        })
        .collect()
}

pub struct DatOutput<T: Element> {
    pub outputs: Vec<TokenSeq<T>>,
    pub attention: Vec<AttentionMap<T>>,
}

/// One layer; returns the four outputs and pushes its attention maps.
pub fn dat_layer_forward<T: Element>(
    tokens: &[TokenSeq<T>],
    layer: &DatLayer,
    config: &DatConfig,
    mode: DatMode,
    index: usize,
    ps: &ParamStore<T>,
    maps: &mut Vec<AttentionMap<T>>,
) -> Result<Vec<TokenSeq<T>>> {
    let mut current: Vec<TokenSeq<T>> = tokens.to_vec();
    let mut query: Vec<TokenSeq<T>> = tokens.to_vec();
    for stage in mode.stages() {
        match stage {
            Stage::Cfa => {
                let params = layer.cfa.as_ref().expect("mode has CFA");
                let normed = normalize_scales(&current, &layer.cfa_norms, ps)?;
                let fused = concat_tokens(&normed, ConcatAxis::Channel)?;
                let out = cfa_forward(&fused, params, config.cfa_heads, ps)
                    .at(|| format!("dat layer {index} cfa"))?;
                for (h, m) in out.attention.into_iter().enumerate() {
                    maps.push(AttentionMap {
                        kind: AttnKind::Cfa,
                        layer: index,
                        scale: None,
                        head: h,
                        matrix: m,
                    });
                }
                current = split_tokens(&out.fused)?;
            }
            Stage::Ssa => {
                let params = layer.ssa.as_ref().expect("mode has SSA");
                query = current.clone();
                let normed = normalize_scales(&current, &layer.ssa_norms, ps)?;
                let kv = concat_tokens(&normed, ConcatAxis::Patch)?;
                let out = ssa_forward(&normed, &kv, params, config.heads, ps)
                    .at(|| format!("dat layer {index} ssa"))?;
                for (s, heads) in out.attention.into_iter().enumerate() {
                    for (h, m) in heads.into_iter().enumerate() {
                        maps.push(AttentionMap {
                            kind: AttnKind::Ssa,
                            layer: index,
                            scale: Some(s + 1),
                            head: h,
                            matrix: m,
                        });
                    }
                }
                current = out.outputs;
            }
        }
    }
    query
        .iter()
        .zip(&current)
        .zip(&layer.mlps)
        .map(|((q, o), mlp)| mlp_block(q, o, mlp, ps))
        .collect::<Result<Vec<_>>>()
        .at(|| format!("dat layer {index} mlp"))
}

/// Runs all `N_L` layers on the per-scale tokens `T_1..T_4`.
pub fn dat_forward<T: Element>(tokens: &[TokenSeq<T>], dat: &Dat, ps: &ParamStore<T>) -> Result<DatOutput<T>> {
    if tokens.len() != NUM_SCALES {
        return Err(Error::shape("dat_forward", "expected four token sequences"));
    }
    let expect = (dat.config.embed_dim, dat.config.tokens);
    if let Some(bad) = tokens.iter().find(|t| t.shape() != expect) {
        return Err(Error::shape(
            "dat_forward",
            format!("expected {expect:?} per scale, got {:?}", bad.shape()),
        ));
    }
    let mut maps = Vec::new();
    let mut x = tokens.to_vec();
    for (l, layer) in dat.layers.iter().enumerate() {
        x = dat_layer_forward(&x, layer, &dat.config, dat.mode, l, ps, &mut maps)?;
    }
    Ok(DatOutput {
        outputs: x,
        attention: maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut ChaCha8Rng, level: usize, c: usize, d: usize) -> TokenSeq<f64> {
        let data = (0..c * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        TokenSeq::level(level, Tensor::new(&[c, d], data).unwrap()).unwrap()
    }

    fn cfg(c: usize, d: usize, heads: usize, layers: usize) -> DatConfig {
        DatConfig {
            embed_dim: c,
            tokens: d,
            heads,
            layers,
            mlp_ratio: 4,
            cfa_heads: 1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(8, 16, 2, 2).validate().is_ok());
        assert!(cfg(8, 16, 3, 2).validate().is_err());
        assert!(cfg(8, 16, 2, 0).validate().is_err());
    }

    #[test]
    fn cfa_uniform_attention_oracle() {
        let (c, d) = (8, 16);
        let config = cfg(c, d, 1, 1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = CfaParams::new(&mut Init::new(&mut store, &mut rng), "cfa", &config).unwrap();
        store.set(params.wq.weight, vec![0.0; d * d]).unwrap();
        store.set(params.wk.weight, vec![0.0; d * d]).unwrap();
        let eye: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
        store.set(params.wv.weight, eye).unwrap();
        let seqs: Vec<_> = (1..=4).map(|l| random_seq(&mut rng, l, c, d)).collect();
        let fused = concat_tokens(&seqs, ConcatAxis::Channel).unwrap();
        let out = cfa_forward(&fused, &params, 1, &store).unwrap();
        let cs = 4 * c;
        let m = &out.attention[0];
        assert_eq!(m.shape(), &[cs, cs]);
        assert!(m.data().iter().all(|&p| (p - 1.0 / cs as f64).abs() < 1e-12));
        // every output row is the mean over channels of V (= the input)
        let x = fused.tokens.data();
        for j in 0..d {
            let mean: f64 = (0..cs).map(|r| x[r * d + j]).sum::<f64>() / cs as f64;
            for r in 0..cs {
                assert!((out.fused.tokens.data()[r * d + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ssa_uniform_when_keys_identical() {
        let (c, d) = (8, 16);
        let config = cfg(c, d, 1, 1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = SsaParams::new(&mut Init::new(&mut store, &mut rng), "ssa", &config).unwrap();
        let queries: Vec<_> = (1..=4).map(|l| random_seq(&mut rng, l, c, d)).collect();
        // every key/value column identical -> K columns identical
        let col: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kv_data: Vec<f64> = (0..c).flat_map(|r| vec![col[r]; 4 * d]).collect();
        let kv = TokenSeq {
            tokens: Tensor::new(&[c, 4 * d], kv_data).unwrap(),
            scale: crate::embedding::ScaleTag::Fused,
            axis: Some(ConcatAxis::Patch),
        };
        let out = ssa_forward(&queries, &kv, &params, 1, &store).unwrap();
        let vmat = params.wv.apply_cols(&store, &kv.tokens).unwrap();
        for (o, maps) in out.outputs.iter().zip(&out.attention) {
            assert!(maps[0].data().iter().all(|&p| (p - 1.0 / (4 * d) as f64).abs() < 1e-12));
            for r in 0..c {
                let mean: f64 = vmat.data()[r * 4 * d..(r + 1) * 4 * d].iter().sum::<f64>() / (4 * d) as f64;
                for j in 0..d {
                    assert!((o.tokens.data()[r * d + j] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ssa_invariant_to_key_value_permutation() {
        let (c, d) = (8, 16);
        let config = cfg(c, d, 2, 1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = SsaParams::new(&mut Init::new(&mut store, &mut rng), "ssa", &config).unwrap();
        let queries: Vec<_> = (1..=4).map(|l| random_seq(&mut rng, l, c, d)).collect();
        let kv = concat_tokens(
            &(1..=4).map(|l| random_seq(&mut rng, l, c, d)).collect::<Vec<_>>(),
            ConcatAxis::Patch,
        )
        .unwrap();
        let n = 4 * d;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.swap(3, 40);
        let src = kv.tokens.data();
        let permuted: Vec<f64> = (0..c).flat_map(|r| perm.iter().map(move |&p| src[r * n + p])).collect();
        let kv2 = TokenSeq {
            tokens: Tensor::new(&[c, n], permuted).unwrap(),
            ..kv.clone()
        };
        let a = ssa_forward(&queries, &kv, &params, 2, &store).unwrap();
        let b = ssa_forward(&queries, &kv2, &params, 2, &store).unwrap();
        for (x, y) in a.outputs.iter().zip(&b.outputs) {
            for (u, v) in x.tokens.data().iter().zip(y.tokens.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_with_zero_weights_is_identity_on_ssa_output() {
        let config = cfg(8, 16, 2, 1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = MlpParams::new(&mut Init::new(&mut store, &mut rng), "mlp", &config).unwrap();
        store.set(mlp.fc1.weight, vec![0.0; 8 * 32]).unwrap();
        store.set(mlp.fc2.weight, vec![0.0; 8 * 32]).unwrap();
        let q = random_seq(&mut rng, 1, 8, 16);
        let o = random_seq(&mut rng, 1, 8, 16);
        let out = mlp_block(&q, &o, &mlp, &store).unwrap();
        assert_eq!(out.tokens.data(), o.tokens.data());
    }

    #[test]
    fn table_one_mlp_hidden_width() {
        let config = cfg(128, 196, 4, 4);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = MlpParams::new(&mut Init::new(&mut store, &mut rng), "mlp", &config).unwrap();
        assert_eq!(store.get(mlp.fc1.weight).shape(), &[512, 128]);
        assert_eq!(store.get(mlp.fc2.weight).shape(), &[128, 512]);
    }

    #[test]
    fn doubling_inputs_does_not_double_outputs() {
        let config = cfg(8, 16, 2, 2);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dat = Dat::new(&mut Init::new(&mut store, &mut rng), "dat", config, DatMode::CfaThenSsa).unwrap();
        let x: Vec<_> = (1..=4).map(|l| random_seq(&mut rng, l, 8, 16)).collect();
        let x2: Vec<_> = x
            .iter()
            .map(|s| TokenSeq::level(1, s.tokens.scale(2.0).unwrap()).unwrap())
            .collect();
        let a = dat_forward(&x, &dat, &store).unwrap();
        let b = dat_forward(&x2, &dat, &store).unwrap();
        let max_dev = a.outputs[0]
            .tokens
            .data()
            .iter()
            .zip(b.outputs[0].tokens.data())
            .map(|(u, v)| (2.0 * u - v).abs())
            .fold(0.0, f64::max);
        assert!(max_dev > 1e-3);
    }

    #[test]
    fn single_layer_equals_manual_composition() {
        let config = cfg(8, 16, 2, 1);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dat = Dat::new(&mut Init::new(&mut store, &mut rng), "dat", config, DatMode::CfaThenSsa).unwrap();
        let x: Vec<_> = (1..=4).map(|l| random_seq(&mut rng, l, 8, 16)).collect();
        let full = dat_forward(&x, &dat, &store).unwrap();

        let layer = &dat.layers[0];
        let normed: Vec<_> = x
            .iter()
            .zip(&layer.cfa_norms)
            .map(|(s, n)| TokenSeq::level(1, n.forward(&store, &s.tokens, 0).unwrap()).unwrap())
            .collect();
        let t_sigma = concat_tokens(&normed, ConcatAxis::Channel).unwrap();
        let cfa = cfa_forward(&t_sigma, layer.cfa.as_ref().unwrap(), 1, &store).unwrap();
        let t_hats = split_tokens(&cfa.fused).unwrap();
        let normed: Vec<_> = t_hats
            .iter()
            .zip(&layer.ssa_norms)
            .map(|(s, n)| TokenSeq::level(1, n.forward(&store, &s.tokens, 0).unwrap()).unwrap())
            .collect();
        let t_hat_sigma = concat_tokens(&normed, ConcatAxis::Patch).unwrap();
        let ssa = ssa_forward(&normed, &t_hat_sigma, layer.ssa.as_ref().unwrap(), 2, &store).unwrap();
        for i in 0..4 {
            let o = mlp_block(&t_hats[i], &ssa.outputs[i], &layer.mlps[i], &store).unwrap();
            assert_eq!(o.tokens.data(), full.outputs[i].tokens.data());
        }
    }

    #[test]
    fn composition_modes_build_the_right_stages() {
        let config = cfg(8, 16, 2, 1);
        for (mode, cfa, ssa) in [
            (DatMode::CfaOnly, true, false),
            (DatMode::SsaOnly, false, true),
            (DatMode::CfaThenSsa, true, true),
            (DatMode::SsaThenCfa, true, true),
        ] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let dat = Dat::new(&mut Init::new(&mut store, &mut rng), "dat", config, mode).unwrap();
            assert_eq!(dat.layers[0].cfa.is_some(), cfa);
            assert_eq!(dat.layers[0].ssa.is_some(), ssa);
            let x: Vec<_> = (1..=4).map(|l| random_seq(&mut rng, l, 8, 16)).collect();
            let out = dat_forward(&x, &dat, &store).unwrap();
            assert!(out.outputs.iter().all(|o| o.shape() == (8, 16)));
            let n_cfa = out.attention.iter().filter(|m| m.kind == AttnKind::Cfa).count();
            let n_ssa = out.attention.iter().filter(|m| m.kind == AttnKind::Ssa).count();
            assert_eq!(n_cfa, usize::from(cfa));
            assert_eq!(n_ssa, if ssa { 8 } else { 0 });
        }
    }
}

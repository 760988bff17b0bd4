//! Patch tokenization of the four encoder scales and reconstruction of token
//! sequences back onto a decoder-level feature grid.
//!
//! Level `i` (1-based) sees a feature map of `H / 2^(i-1)` pixels per side
//! and is cut into patches of `P / 2^(i-1)`, so every level yields the same
//! number of tokens `d = H * W / P^2`. Patches are numbered row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, PROJ_INIT_STD};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{concat, Element, Tensor};

pub const NUM_SCALES: usize = 4;

/// Geometry of one encoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    /// 1-based level; 1 is full resolution.
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub patch: usize,
}

impl ScaleSpec {
    pub fn new(level: usize, image_h: usize, image_w: usize, base_patch: usize, in_channels: usize) -> Result<Self> {
        if !(1..=NUM_SCALES).contains(&level) {
            return Err(Error::Config(format!("level must be 1..=4, got {level}")));
        }
        let f = 1usize << (level - 1);
        if base_patch % f != 0 || base_patch / f == 0 {
            return Err(Error::Config(format!(
                "patch size {base_patch} cannot be halved down to level {level} (needs a multiple of {f})"
            )));
        }
        if image_h % f != 0 || image_w % f != 0 {
            return Err(Error::Config(format!(
                "image {image_h}x{image_w} not divisible by {f} at level {level}"
            )));
        }
        let spec = Self {
            level,
            height: image_h / f,
            width: image_w / f,
            in_channels,
            patch: base_patch / f,
        };
        if spec.height % spec.patch != 0 || spec.width % spec.patch != 0 {
            return Err(Error::Config(format!(
                "level {level} map {}x{} not divisible by patch {}",
                spec.height, spec.width, spec.patch
            )));
        }
        Ok(spec)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }
}

/// Specs for all four levels given per-level encoder widths.
pub fn scale_specs(image_h: usize, image_w: usize, base_patch: usize, channels: [usize; NUM_SCALES]) -> Result<[ScaleSpec; NUM_SCALES]> {
    let mut out = Vec::with_capacity(NUM_SCALES);
    for (i, &c) in channels.iter().enumerate() {
        out.push(ScaleSpec::new(i + 1, image_h, image_w, base_patch, c)?);
    }
    let d = out[0].tokens();
    debug_assert!(out.iter().all(|s| s.tokens() == d));
    Ok(out.try_into().expect("four scales"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleTag {
    Level(usize),
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConcatAxis {
    /// Stacked along channels: `4C x d`.
    Channel,
    /// Stacked along patches: `C x 4d`.
    Patch,
}

/// A `channels x patches` token matrix.
#[derive(Debug, Clone)]
pub struct TokenSeq<T: Element> {
    pub tokens: Tensor<T>,
    pub scale: ScaleTag,
    pub axis: Option<ConcatAxis>,
}

impl<T: Element> TokenSeq<T> {
    pub fn level(level: usize, tokens: Tensor<T>) -> Result<Self> {
        if tokens.ndim() != 2 {
            return Err(Error::shape("token_seq", format!("expected C x d, got {:?}", tokens.shape())));
        }
        Ok(Self {
            tokens,
            scale: ScaleTag::Level(level),
            axis: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels(), self.len())
    }
}

/// Stacks four per-scale sequences (level order) along `axis`.
pub fn concat_tokens<T: Element>(seqs: &[TokenSeq<T>], axis: ConcatAxis) -> Result<TokenSeq<T>> {
    if seqs.len() != NUM_SCALES {
        return Err(Error::shape("concat_tokens", format!("expected 4 sequences, got {}", seqs.len())));
    }
    let first = seqs[0].shape();
    if seqs.iter().any(|s| s.shape() != first || s.axis.is_some()) {
        return Err(Error::shape(
            "concat_tokens",
            format!(
                "per-scale shapes differ: {:?}",
                seqs.iter().map(|s| s.shape()).collect::<Vec<_>>()
            ),
        ));
    }
    let parts: Vec<Tensor<T>> = seqs.iter().map(|s| s.tokens.clone()).collect();
    let dim = match axis {
        ConcatAxis::Channel => 0,
        ConcatAxis::Patch => 1,
    };
    Ok(TokenSeq {
        tokens: concat(&parts, dim)?,
        scale: ScaleTag::Fused,
        axis: Some(axis),
    })
}

/// Inverse of [`concat_tokens`].
pub fn split_tokens<T: Element>(fused: &TokenSeq<T>) -> Result<Vec<TokenSeq<T>>> {
    let dim = match fused.axis {
        Some(ConcatAxis::Channel) => 0,
        Some(ConcatAxis::Patch) => 1,
        None => return Err(Error::shape("split_tokens", "sequence was not concatenated")),
    };
    fused
        .tokens
        .chunk(dim, NUM_SCALES)?
        .into_iter()
        .enumerate()
        .map(|(i, t)| TokenSeq::level(i + 1, t))
        .collect()
}

/// Strided patch projection to `C` channels plus an optional learned
/// positional embedding (`C x d`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchEmbed {
    pub spec: ScaleSpec,
    pub proj: Conv,
    pub pos: Option<ParamId>,
    pub embed_dim: usize,
}

impl PatchEmbed {
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        spec: ScaleSpec,
        embed_dim: usize,
        positional: bool,
    ) -> Result<Self> {
        let proj = Conv::new(
            init,
            &format!("{name}.proj"),
            spec.in_channels,
            embed_dim,
            spec.patch,
            spec.patch,
            0,
        )?;
        let pos = if positional {
            Some(init.trunc_normal(&format!("{name}.pos"), &[embed_dim, spec.tokens()], PROJ_INIT_STD)?)
        } else {
            None
        };
        Ok(Self {
            spec,
            proj,
            pos,
            embed_dim,
        })
    }

    /// `E_i (C_i x h x w) -> T_i (C x d)`; column `j` is patch `j` in row-major order.
    pub fn tokenize<T: Element>(&self, ps: &ParamStore<T>, feature: &Tensor<T>) -> Result<TokenSeq<T>> {
        let s = &self.spec;
        if feature.shape() != [s.in_channels, s.height, s.width] {
            return Err(Error::shape(
                "tokenize",
                format!(
                    "level {} expects {:?}, got {:?}",
                    s.level,
                    [s.in_channels, s.height, s.width],
                    feature.shape()
                ),
            ));
        }
        let grid = self.proj.forward(ps, feature)?;
        let mut tokens = grid.reshape(&[self.embed_dim, s.tokens()])?;
        if let Some(pos) = self.pos {
            tokens = tokens.add(ps.get(pos))?;
        }
        TokenSeq::level(s.level, tokens)
    }
}

/// Token grid -> nearest upsample by the patch size -> 3x3 conv to the
/// decoder width of the level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reconstruct {
    pub spec: ScaleSpec,
    pub conv: Conv,
    pub out_channels: usize,
}

impl Reconstruct {
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        spec: ScaleSpec,
        embed_dim: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            spec,
            conv: Conv::same3(init, &format!("{name}.conv"), embed_dim, out_channels)?,
            out_channels,
        })
    }

    pub fn detokenize<T: Element>(&self, ps: &ParamStore<T>, seq: &TokenSeq<T>) -> Result<Tensor<T>> {
        let (gh, gw) = self.spec.grid();
        let (c, d) = seq.shape();
        if d != gh * gw {
            return Err(Error::shape(
                "detokenize",
                format!("level {} expects {} tokens, got {d}", self.spec.level, gh * gw),
            ));
        }
        let grid = seq.tokens.reshape(&[c, gh, gw])?;
        let up = grid.upsample_nearest(self.spec.patch)?;
        self.conv.forward(ps, &up)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_one_token_counts() {
        let specs = scale_specs(224, 224, 16, [32, 64, 128, 256]).unwrap();
        assert!(specs.iter().all(|s| s.tokens() == 196));
        assert_eq!(specs.map(|s| s.patch), [16, 8, 4, 2]);
        let specs = scale_specs(224, 224, 8, [32, 64, 128, 256]).unwrap();
        assert!(specs.iter().all(|s| s.tokens() == 784));
    }

    #[test]
    fn patch_must_survive_three_halvings() {
        // P = 4 would need a half-pixel patch at level 4.
        assert!(scale_specs(16, 16, 4, [1; 4]).is_err());
        let specs = scale_specs(16, 16, 8, [1; 4]).unwrap();
        assert!(specs.iter().all(|s| s.tokens() == 4));
        assert!(scale_specs(24, 24, 16, [1; 4]).is_err());
    }

    #[test]
    fn token_count_equal_across_levels_for_all_valid_configs() {
        for hw in [16, 32, 64, 224] {
            for p in [4, 8, 16] {
                if let Ok(specs) = scale_specs(hw, hw, p, [3; 4]) {
                    let d = hw * hw / (p * p);
                    assert!(specs.iter().all(|s| s.tokens() == d), "H={hw} P={p}");
                }
            }
        }
    }

    #[test]
    fn concat_shapes_and_split_round_trip() {
        let seqs: Vec<TokenSeq<f64>> = (0..4)
            .map(|i| {
                let data: Vec<f64> = (0..128 * 196).map(|v| (v + i * 7) as f64 * 1e-3).collect();
                TokenSeq::level(i + 1, Tensor::new(&[128, 196], data).unwrap()).unwrap()
            })
            .collect();
        let ch = concat_tokens(&seqs, ConcatAxis::Channel).unwrap();
        assert_eq!(ch.shape(), (512, 196));
        let pa = concat_tokens(&seqs, ConcatAxis::Patch).unwrap();
        assert_eq!(pa.shape(), (128, 784));
        for fused in [ch, pa] {
            let back = split_tokens(&fused).unwrap();
            for (a, b) in back.iter().zip(&seqs) {
                assert_eq!(a.tokens.data(), b.tokens.data());
            }
            let again = concat_tokens(&back, fused.axis.unwrap()).unwrap();
            assert_eq!(again.tokens.data(), fused.tokens.data());
        }
    }

    #[test]
    fn detokenize_matches_decoder_geometry() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut store, &mut rng);
        let specs = scale_specs(224, 224, 16, [32, 64, 128, 256]).unwrap();
        let rec = Reconstruct::new(&mut init, "rec1", specs[0], 128, 32).unwrap();
        let seq = TokenSeq::level(1, Tensor::zeros(&[128, 196])).unwrap();
        let out = rec.detokenize(&store, &seq).unwrap();
        assert_eq!(out.shape(), &[32, 224, 224]);
        let bad = TokenSeq::level(1, Tensor::zeros(&[128, 195])).unwrap();
        assert!(rec.detokenize(&store, &bad).is_err());
    }

    fn random_feature(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        use rand::Rng;
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn averaging_round_trip_preserves_patch_means() {
        let (c, hw, p) = (3, 32, 8);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let specs = scale_specs(hw, hw, p, [c; 4]).unwrap();
        let mut init = Init::new(&mut store, &mut rng);
        let embeds: Vec<_> = specs.iter().map(|&s| PatchEmbed::new(&mut init, &format!("e{}", s.level), s, c, false).unwrap()).collect();
        let recons: Vec<_> = specs.iter().map(|&s| Reconstruct::new(&mut init, &format!("r{}", s.level), s, c, c).unwrap()).collect();
        for (e, r) in embeds.iter().zip(&recons) {
            let pi = e.spec.patch;
            // averaging patch projection, identity centre tap for the reconstruction conv
            let avg = (0..c * c * pi * pi).map(|i| if i / (c * pi * pi) == (i / (pi * pi)) % c { 1.0 / (pi * pi) as f64 } else { 0.0 }).collect();
            store.set(e.proj.weight, avg).unwrap();
            let eye = (0..c * c * 9).map(|i| if i % 9 == 4 && i / (9 * c) == (i / 9) % c { 1.0 } else { 0.0 }).collect();
            store.set(r.conv.weight, eye).unwrap();
        }
        for (e, r) in embeds.iter().zip(&recons) {
            let s = e.spec;
            let x = random_feature(&mut rng, c, s.height, s.width);
            let tokens = e.tokenize(&store, &x).unwrap();
            let back = r.detokenize(&store, &tokens).unwrap();
            assert_eq!(back.shape(), x.shape());
            let (gh, gw) = s.grid();
            let mean = |t: &Tensor<f64>, ch: usize, py: usize, px: usize| {
                let mut acc = 0.0;
                for y in py * s.patch..(py + 1) * s.patch {
                    for xx in px * s.patch..(px + 1) * s.patch {
                        acc += t.data()[(ch * s.height + y) * s.width + xx];
                    }
                }
                acc / (s.patch * s.patch) as f64
            };
            for ch in 0..c {
                for py in 0..gh {
                    for px in 0..gw {
                        let pooled = mean(&x, ch, py, px);
                        assert!((tokens.tokens.data()[ch * gh * gw + py * gw + px] - pooled).abs() < 1e-12);
                        assert!((mean(&back, ch, py, px) - pooled).abs() < 1e-5, "level {} patch ({py},{px})", s.level);
                    }
                }
            }
        }
    }

    #[test]
    fn token_column_depends_only_on_its_patch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = scale_specs(32, 32, 8, [4; 4]).unwrap()[0];
        let embed = PatchEmbed::new(&mut Init::new(&mut store, &mut rng), "e", spec, 6, true).unwrap();
        let x = random_feature(&mut rng, 4, 32, 32);
        let base = embed.tokenize(&store, &x).unwrap().tokens;
        let (gh, gw) = spec.grid();
        let d = gh * gw;
        for target in [0, 5, d - 1] {
            let (py, px) = (target / gw, target % gw);
            let mut data = x.data().to_vec();
            for ch in 0..4 {
                for y in py * 8..(py + 1) * 8 {
                    for xx in px * 8..(px + 1) * 8 {
                        data[(ch * 32 + y) * 32 + xx] += 0.5;
                    }
                }
            }
            let moved = embed.tokenize(&store, &Tensor::new(&[4, 32, 32], data).unwrap()).unwrap().tokens;
            for j in 0..d {
                let changed = (0..6).any(|r| base.data()[r * d + j] != moved.data()[r * d + j]);
                assert_eq!(changed, j == target, "column {j} after perturbing patch {target}");
            }
        }
    }
}

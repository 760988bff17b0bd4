//! U-shaped segmentation network with pluggable skip connections.
//!
//! Encoder: four stages (the first at full resolution, the rest after 2x max
//! pooling) and a pooled bottleneck. Decoder level `i` upsamples the deeper
//! feature, convolves it to width `C_i` (this is `D_i`), merges it with the
//! level's skip input and refines it. The mask head maps level 1 to `K`
//! logits per pixel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dat::{dat_forward, AttentionMap, AttnKind, Dat, DatConfig, DatMode};
use crate::dra::{dra_forward, fuse_decoder, DraParams, DraVariant};
use crate::embedding::{scale_specs, PatchEmbed, Reconstruct, ScaleSpec, TokenSeq, NUM_SCALES};
use crate::error::{Error, Result, ResultExt};
use crate::nn::Conv;
use crate::params::{Init, ParamStore};
use crate::tensor::{concat, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockType {
    PlainConv,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: [usize; NUM_SCALES],
    pub bottleneck: usize,
    pub block: BlockType,
}

impl BackboneSpec {
    /// Plain double-conv U-Net, widths 32/64/128/256, bottleneck 512.
    pub fn desk(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            widths: [32, 64, 128, 256],
            bottleneck: 512,
            block: BlockType::PlainConv,
        }
    }

    /// ResNet-34 stage widths with residual blocks (randomly initialized).
    pub fn resnet34_widths(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            widths: [64, 128, 256, 512],
            bottleneck: 512,
            block: BlockType::Residual,
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.in_channels == 0 {
            p.push("backbone.in_channels must be positive".into());
        }
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            p.push(format!(
                "backbone image size {}x{} must be a positive multiple of 16",
                self.height, self.width
            ));
        }
        if self.widths.contains(&0) || self.bottleneck == 0 {
            p.push("backbone widths must be positive".into());
        }
        p
    }
}

fn default_mlp_ratio() -> usize {
    4
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_mode() -> DatMode {
    DatMode::CfaThenSsa
}

fn default_variant() -> DraVariant {
    DraVariant::Channel
}

/// Settings of the DAT + DRA skip path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UdTransConfig {
    /// Patch size `P` at level 1.
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "one")]
    pub cfa_heads: usize,
    #[serde(default = "yes")]
    pub positional: bool,
    #[serde(default = "default_mode")]
    pub mode: DatMode,
    #[serde(default = "yes")]
    pub dra: bool,
    #[serde(default = "default_variant")]
    pub dra_variant: DraVariant,
}

impl UdTransConfig {
    /// `P=16, C=128, N_H=4, N_L=4`.
    pub fn table1() -> Self {
        Self {
            patch: 16,
            embed_dim: 128,
            heads: 4,
            layers: 4,
            mlp_ratio: 4,
            cfa_heads: 1,
            positional: true,
            mode: DatMode::CfaThenSsa,
            dra: true,
            dra_variant: DraVariant::Channel,
        }
    }

    pub fn dat_config(&self, image_h: usize, image_w: usize) -> DatConfig {
        DatConfig {
            embed_dim: self.embed_dim,
            tokens: image_h * image_w / (self.patch * self.patch).max(1),
            heads: self.heads,
            layers: self.layers,
            mlp_ratio: self.mlp_ratio,
            cfa_heads: self.cfa_heads,
        }
    }

    pub fn label(&self) -> String {
        let attn = match self.mode {
            DatMode::CfaOnly => "CFA",
            DatMode::SsaOnly => "SSA",
            DatMode::CfaThenSsa => "CFA->SSA",
            DatMode::SsaThenCfa => "SSA->CFA",
        };
        let dra = match (self.dra, self.dra_variant) {
            (false, _) => String::new(),
            (true, DraVariant::Channel) => "+DRA-C".into(),
            (true, DraVariant::Spatial) => "+DRA-S".into(),
        };
        format!("{attn}{dra} (H{} L{})", self.heads, self.layers)
    }
}

/// Which encoder levels feed the decoder, and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SkipStrategy {
    None,
    All,
    Only { level: usize },
    Without { level: usize },
    UdTrans(UdTransConfig),
}

impl SkipStrategy {
    /// Whether a plain strategy copies encoder level `level` (1-based).
    pub fn uses_level(&self, level: usize) -> bool {
        match *self {
            SkipStrategy::None => false,
            SkipStrategy::All | SkipStrategy::UdTrans(_) => true,
            SkipStrategy::Only { level: l } => l == level,
            SkipStrategy::Without { level: l } => l != level,
        }
    }

    pub fn label(&self) -> String {
        match self {
            SkipStrategy::None => "None".into(),
            SkipStrategy::All => "All".into(),
            SkipStrategy::Only { level } => format!("L{level}"),
            SkipStrategy::Without { level } => format!("w/o L{level}"),
            SkipStrategy::UdTrans(u) => format!("UDTrans {}", u.label()),
        }
    }

    /// The ten plain strategies of the skip-connection study.
    pub fn plain_suite() -> Vec<SkipStrategy> {
        let mut v = vec![SkipStrategy::None, SkipStrategy::All];
        v.extend((1..=4).map(|level| SkipStrategy::Only { level }));
        v.extend((1..=4).map(|level| SkipStrategy::Without { level }));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub skip: SkipStrategy,
    pub classes: usize,
}

impl ModelConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.backbone.problems();
        if self.classes < 2 {
            p.push(format!("classes must be >= 2, got {}", self.classes));
        }
        match self.skip {
            SkipStrategy::Only { level } | SkipStrategy::Without { level } if !(1..=4).contains(&level) => {
                p.push(format!("skip level must be 1..=4, got {level}"));
            }
            SkipStrategy::UdTrans(u) => {
                let (h, w) = (self.backbone.height, self.backbone.width);
                if u.patch == 0 || u.patch % 8 != 0 {
                    p.push(format!("patch {} must be a positive multiple of 8", u.patch));
                } else if h % u.patch != 0 || w % u.patch != 0 {
                    p.push(format!("image {h}x{w} not divisible by patch {}", u.patch));
                } else if let Err(e) = u.dat_config(h, w).validate() {
                    p.push(e.to_string());
                }
            }
            _ => {}
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Block {
    Plain { conv1: Conv, conv2: Conv },
    Residual { conv1: Conv, conv2: Conv, shortcut: Option<Conv> },
}

impl Block {
    fn new<T: Element>(init: &mut Init<'_, T>, name: &str, kind: BlockType, c_in: usize, c_out: usize) -> Result<Self> {
        let conv1 = Conv::same3(init, &format!("{name}.conv1"), c_in, c_out)?;
        let conv2 = Conv::same3(init, &format!("{name}.conv2"), c_out, c_out)?;
        Ok(match kind {
            BlockType::PlainConv => Block::Plain { conv1, conv2 },
            BlockType::Residual => Block::Residual {
                conv1,
                conv2,
                shortcut: if c_in != c_out {
                    Some(Conv::new(init, &format!("{name}.shortcut"), c_in, c_out, 1, 1, 0)?)
                } else {
                    None
                },
            },
        })
    }

    fn forward<T: Element>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Block::Plain { conv1, conv2 } => conv2.forward(ps, &conv1.forward(ps, x)?.relu()?)?.relu(),
            Block::Residual { conv1, conv2, shortcut } => {
                let h = conv2.forward(ps, &conv1.forward(ps, x)?.relu()?)?;
                let s = match shortcut {
                    Some(c) => c.forward(ps, x)?,
                    None => x.clone(),
                };
                h.add(&s)?.relu()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderLevel {
    /// Applied after 2x bilinear upsampling; output is `D_i`.
    pub up: Conv,
    /// Consumes `D_i` (plus the skip input, if any) and restores width `C_i`.
    pub merge: Conv,
    pub refine: Conv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UdTransPath {
    pub config: UdTransConfig,
    pub embeds: Vec<PatchEmbed>,
    pub dat: Dat,
    pub dra: Vec<DraParams>,
    pub recon: Vec<Reconstruct>,
}

/// Parameter layout of the whole network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegNet {
    pub encoder: Vec<Block>,
    pub bottleneck: Block,
    /// Index 0 is level 1.
    pub decoder: Vec<DecoderLevel>,
    pub udtrans: Option<UdTransPath>,
    pub head_conv: Conv,
    pub head_out: Conv,
}

impl SegNet {
    pub fn new<T: Element>(init: &mut Init<'_, T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let b = &config.backbone;
        let mut encoder = Vec::with_capacity(NUM_SCALES);
        let mut c_prev = b.in_channels;
        for (i, &w) in b.widths.iter().enumerate() {
            encoder.push(Block::new(init, &format!("enc{}", i + 1), b.block, c_prev, w)?);
            c_prev = w;
        }
        let bottleneck = Block::new(init, "bottleneck", b.block, c_prev, b.bottleneck)?;

        let udtrans = match config.skip {
            SkipStrategy::UdTrans(u) => Some(Self::build_udtrans(init, b, u)?),
            _ => None,
        };

        // built deepest-first so the names follow the data flow
        let mut decoder = Vec::with_capacity(NUM_SCALES);
        let mut c_in = b.bottleneck;
        for level in (1..=NUM_SCALES).rev() {
            let w = b.widths[level - 1];
            let merge_in = if config.skip.uses_level(level) { 2 * w } else { w };
            decoder.push(DecoderLevel {
                up: Conv::same3(init, &format!("dec{level}.up"), c_in, w)?,
                merge: Conv::same3(init, &format!("dec{level}.merge"), merge_in, w)?,
                refine: Conv::same3(init, &format!("dec{level}.refine"), w, w)?,
            });
            c_in = w;
        }
        decoder.reverse();
        let w1 = b.widths[0];
        Ok(Self {
            encoder,
            bottleneck,
            decoder,
            udtrans,
            head_conv: Conv::same3(init, "head.conv", w1, w1)?,
            head_out: Conv::new(init, "head.out", w1, config.classes, 1, 1, 0)?,
        })
    }

    fn build_udtrans<T: Element>(init: &mut Init<'_, T>, b: &BackboneSpec, u: UdTransConfig) -> Result<UdTransPath> {
        let enc_specs = scale_specs(b.height, b.width, u.patch, b.widths)?;
        let dat_cfg = u.dat_config(b.height, b.width);
        let embeds = enc_specs
            .iter()
            .map(|s| PatchEmbed::new(init, &format!("embed{}", s.level), *s, u.embed_dim, u.positional))
            .collect::<Result<_>>()?;
        let dat = Dat::new(init, "dat", dat_cfg, u.mode)?;
        // decoder width equals encoder width at every level
        let dec_specs: Vec<ScaleSpec> = enc_specs.to_vec();
        let dra = if u.dra {
            dec_specs
                .iter()
                .map(|s| DraParams::new(init, &format!("dra{}", s.level), *s, u.embed_dim, u.positional))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let recon = dec_specs
            .iter()
            .map(|s| Reconstruct::new(init, &format!("recon{}", s.level), *s, u.embed_dim, s.in_channels))
            .collect::<Result<_>>()?;
        Ok(UdTransPath {
            config: u,
            embeds,
            dat,
            dra,
            recon,
        })
    }
}

/// Encoder outputs: `E_1..E_4` and the bottleneck.
#[derive(Debug, Clone)]
pub struct Encoded<T: Element> {
    pub features: Vec<Tensor<T>>,
    pub bottleneck: Tensor<T>,
}

/// Attention maps and decoder features collected by a traced forward pass.
#[derive(Debug)]
pub struct ForwardTrace<T: Element> {
    pub attention: Vec<AttentionMap<T>>,
    /// `D_1..D_4`.
    pub decoder_features: Vec<Tensor<T>>,
    pub dat_outputs: Vec<TokenSeq<T>>,
}

impl<T: Element> Default for ForwardTrace<T> {
    fn default() -> Self {
        Self {
            attention: Vec::new(),
            decoder_features: Vec::new(),
            dat_outputs: Vec::new(),
        }
    }
}

/// A network layout plus its parameter values.
pub struct SegModel<T: Element = f32> {
    pub config: ModelConfig,
    pub seed: u64,
    pub net: SegNet,
    pub params: ParamStore<T>,
}

/// Builds and seeds a model; equal configs and seeds give bit-identical parameters.
pub fn build_model(backbone: BackboneSpec, skip: SkipStrategy, classes: usize, seed: u64) -> Result<SegModel<f32>> {
    SegModel::build(
        ModelConfig {
            backbone,
            skip,
            classes,
        },
        seed,
    )
}

impl<T: Element> SegModel<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SegNet::new(&mut Init::new(&mut params, &mut rng), &config)?;
        Ok(Self {
            config,
            seed,
            net,
            params,
        })
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Same layout and values in another precision.
    pub fn cast<U: Element>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            seed: self.seed,
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn encode(&self, ps: &ParamStore<T>, image: &Tensor<T>) -> Result<Encoded<T>> {
        let b = &self.config.backbone;
        if image.shape() != [b.in_channels, b.height, b.width] {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "image {:?} does not match backbone {:?}",
                    image.shape(),
                    [b.in_channels, b.height, b.width]
                ),
            ));
        }
        let mut features = Vec::with_capacity(NUM_SCALES);
        let mut x = image.clone();
        for (i, block) in self.net.encoder.iter().enumerate() {
            if i > 0 {
                x = x.max_pool2d(2)?;
            }
            x = block.forward(ps, &x).at(|| format!("encoder stage {}", i + 1))?;
            features.push(x.clone());
        }
        let bottleneck = self
            .net
            .bottleneck
            .forward(ps, &x.max_pool2d(2)?)
            .at(|| "bottleneck".to_string())?;
        Ok(Encoded { features, bottleneck })
    }

    pub fn decode(&self, ps: &ParamStore<T>, enc: &Encoded<T>, mut trace: Option<&mut ForwardTrace<T>>) -> Result<Tensor<T>> {
        let dat_out = match &self.net.udtrans {
            Some(path) => {
                let tokens = path
                    .embeds
                    .iter()
                    .zip(&enc.features)
                    .map(|(e, f)| e.tokenize(ps, f))
                    .collect::<Result<Vec<_>>>()
                    .at(|| "token embedding".to_string())?;
                let out = dat_forward(&tokens, &path.dat, ps).at(|| "dat".to_string())?;
                if let Some(t) = trace.as_deref_mut() {
                    t.attention.extend(out.attention.iter().cloned());
                    t.dat_outputs = out.outputs.clone();
                }
                Some(out.outputs)
            }
            None => None,
        };

        let mut x = enc.bottleneck.clone();
        for level in (1..=NUM_SCALES).rev() {
            let dl = &self.net.decoder[level - 1];
            x = self
                .decode_level(ps, level, dl, &x, enc, dat_out.as_deref(), trace.as_deref_mut())
                .at(|| format!("decoder level {level}"))?;
        }
        let h = self.net.head_conv.forward(ps, &x)?.relu()?;
        self.net.head_out.forward(ps, &h).at(|| "mask head".to_string())
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_level(
        &self,
        ps: &ParamStore<T>,
        level: usize,
        dl: &DecoderLevel,
        below: &Tensor<T>,
        enc: &Encoded<T>,
        dat_out: Option<&[TokenSeq<T>]>,
        mut trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Tensor<T>> {
        let d = dl.up.forward(ps, &below.upsample_bilinear(2)?)?.relu()?;
        let merged = match (&self.net.udtrans, dat_out) {
            (Some(path), Some(outs)) => {
                let o = &outs[level - 1];
                let o_hat = if path.config.dra {
                    let r = dra_forward(o, &d, &path.dra[level - 1], path.config.dra_variant, ps)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.attention.push(AttentionMap {
                            kind: match path.config.dra_variant {
                                DraVariant::Channel => AttnKind::DraChannel,
                                DraVariant::Spatial => AttnKind::DraSpatial,
                            },
                            layer: 0,
                            scale: Some(level),
                            head: 0,
                            matrix: r.attention.clone(),
                        });
                    }
                    r.recalibrated
                } else {
                    o.clone()
                };
                fuse_decoder(&o_hat, &d, &path.recon[level - 1], &dl.merge, ps)?
            }
            _ if self.config.skip.uses_level(level) => {
                let cat = concat(&[d.clone(), enc.features[level - 1].clone()], 0)?;
                dl.merge.forward(ps, &cat)?.relu()?
            }
            _ => dl.merge.forward(ps, &d)?.relu()?,
        };
        if let Some(t) = trace {
            t.decoder_features.push(d);
        }
        dl.refine.forward(ps, &merged)?.relu()
    }

    /// Logits `K x H x W` for a `c_in x H x W` image, evaluated against `ps`.
    pub fn forward_with(&self, ps: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let enc = self.encode(ps, image)?;
        self.decode(ps, &enc, None)
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(&self.params, image)
    }

    pub fn forward_traced(&self, image: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let mut trace = ForwardTrace::default();
        let enc = self.encode(&self.params, image)?;
        let logits = self.decode(&self.params, &enc, Some(&mut trace))?;
        trace.decoder_features.reverse();
        Ok((logits, trace))
    }

    /// Parameters detached from gradient tracking, for inference passes.
    pub fn frozen_params(&self) -> ParamStore<T> {
        self.params.frozen()
    }
}

/// Per-pixel argmax over the class axis of `K x H x W` logits.
pub fn argmax_mask<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let shape = logits.shape();
    let (k, hw) = (shape[0], shape[1] * shape[2]);
    let x = logits.data();
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if x[c * hw + p] > x[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

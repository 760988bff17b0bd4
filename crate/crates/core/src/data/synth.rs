//! Synthetic segmentation data: blob, ellipse and ring objects at three size
//! tiers on a textured background, with optional noise and boundary blur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Image, Mask, Sample};
use crate::error::{Error, Result};

/// Fractions of small, medium and large objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleMix {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl Default for ScaleMix {
    fn default() -> Self {
        Self {
            small: 0.3,
            medium: 0.4,
            large: 0.3,
        }
    }
}

fn default_channels() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub classes: usize,
    /// Inclusive range of objects per image.
    pub objects: (usize, usize),
    #[serde(default)]
    pub scale_mix: ScaleMix,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Box-blur radius in pixels applied to the image (the mask stays exact).
    pub blur: usize,
    /// Amplitude of the background texture.
    pub texture: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn toy(size: usize, seed: u64) -> Self {
        Self {
            height: size,
            width: size,
            channels: 1,
            classes: 2,
            objects: (1, 3),
            scale_mix: ScaleMix::default(),
            noise: 0.08,
            blur: 1,
            texture: 0.1,
            seed,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.height < 8 || self.width < 8 {
            p.push(format!("synthetic images must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.channels != 1 && self.channels != 3 {
            p.push(format!("synthetic channels must be 1 or 3, got {}", self.channels));
        }
        if !(2..=255).contains(&self.classes) {
            p.push(format!("synthetic classes must be in 2..=255, got {}", self.classes));
        }
        if self.objects.0 > self.objects.1 {
            p.push(format!("object range {:?} is empty", self.objects));
        }
        let m = self.scale_mix;
        if [m.small, m.medium, m.large].iter().any(|&f| !(0.0..=1.0).contains(&f))
            || (m.small + m.medium + m.large - 1.0).abs() > 1e-9
        {
            p.push("scale_mix fractions must lie in [0, 1] and sum to 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            p.push("noise must be finite and non-negative".into());
        }
        if !(0.0..=0.5).contains(&self.texture) {
            p.push("texture must lie in [0, 0.5]".into());
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

const BACKGROUND: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Blob { harmonics: [(f64, f64, f64); 3] },
    Ellipse { aspect: f64 },
    Ring { inner: f64 },
}

struct Object {
    class: u8,
    cy: f64,
    cx: f64,
    radius: f64,
    angle: f64,
    shape: Shape,
    intensity: f64,
}

impl Object {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.shape {
            Shape::Ellipse { aspect } => {
                (u / self.radius).powi(2) + (v / (self.radius * aspect)).powi(2) <= 1.0
            }
            Shape::Ring { inner } => {
                let r = (u * u + v * v).sqrt() / self.radius;
                (inner..=1.0).contains(&r)
            }
            Shape::Blob { harmonics } => {
                let theta = v.atan2(u);
                let wobble: f64 = harmonics.iter().map(|&(k, a, p)| a * (k * theta + p).sin()).sum();
                (u * u + v * v).sqrt() <= self.radius * (1.0 + wobble)
            }
        }
    }
}

fn class_intensity(class: u8, classes: usize) -> f64 {
    // foreground classes spread over [0.55, 0.95]
    if classes <= 2 {
        0.75
    } else {
        0.55 + 0.4 * (class as f64 - 1.0) / (classes as f64 - 2.0)
    }
}

fn draw_object(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Object {
    let side = spec.height.min(spec.width) as f64;
    let m = spec.scale_mix;
    let u: f64 = rng.random();
    let (lo, hi) = if u < m.small {
        (0.04, 0.08)
    } else if u < m.small + m.medium {
        (0.10, 0.16)
    } else {
        (0.20, 0.28)
    };
    let radius = (side * rng.random_range(lo..hi)).max(1.0);
    let shape = match rng.random_range(0..3) {
        0 => Shape::Blob {
            harmonics: [
                (2.0, rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU)),
                (3.0, rng.random_range(0.0..0.1), rng.random_range(0.0..std::f64::consts::TAU)),
                (5.0, rng.random_range(0.0..0.05), rng.random_range(0.0..std::f64::consts::TAU)),
            ],
        },
        1 => Shape::Ellipse {
            aspect: rng.random_range(0.45..1.0),
        },
        _ => Shape::Ring {
            inner: rng.random_range(0.35..0.6),
        },
    };
    let class = rng.random_range(1..spec.classes) as u8;
    Object {
        class,
        cy: rng.random_range(radius * 0.5..spec.height as f64 - radius * 0.5),
        cx: rng.random_range(radius * 0.5..spec.width as f64 - radius * 0.5),
        radius,
        angle: rng.random_range(0.0..std::f64::consts::PI),
        shape,
        intensity: class_intensity(class, spec.classes) + rng.random_range(-0.05..0.05),
    }
}

fn box_blur(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let (a, b) = (pos.saturating_sub(r), (pos + r).min(len - 1));
                let sum: f64 = (a..=b)
                    .map(|k| if horizontal { src[y * w + k] } else { src[k * w + x] })
                    .sum();
                out[y * w + x] = sum / (b - a + 1) as f64;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

fn render(spec: &SynthSpec, rng: &mut ChaCha8Rng, index: usize) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let objects: Vec<Object> = (0..count).map(|_| draw_object(spec, rng)).collect();

    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut base = vec![0.0; h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let tex: f64 = waves
                .iter()
                .map(|&(f, theta, phase)| (f * (x as f64 * theta.cos() + y as f64 * theta.sin()) + phase).sin())
                .sum::<f64>()
                / 3.0;
            let mut v = BACKGROUND + spec.texture * tex;
            // later objects are painted over earlier ones
            for o in &objects {
                if o.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    v = o.intensity;
                    mask[y * w + x] = o.class;
                }
            }
            base[y * w + x] = v;
        }
    }
    if spec.blur > 0 {
        base = box_blur(&base, h, w, spec.blur);
    }

    let gains: &[f64] = if spec.channels == 3 { &[1.0, 0.85, 0.7] } else { &[1.0] };
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(spec.channels * h * w);
    for &g in gains {
        for &v in &base {
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((g * v + n).clamp(0.0, 1.0) as f32);
        }
    }
    Sample {
        id: format!("synth_{index:05}"),
        image: Image {
            channels: spec.channels,
            height: h,
            width: w,
            data,
        },
        mask: Mask {
            height: h,
            width: w,
            data: mask,
        },
    }
}

/// `n` samples; sample `i` depends only on `spec` and `i`.
pub fn gen_synthetic(spec: &SynthSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            render(spec, &mut rng, i)
        })
        .collect())
}

//! Random flips and quarter-turn rotations applied identically to image and mask.

use rand::Rng;

use super::{Image, Mask, Sample};

/// Horizontal flip, then vertical flip, then `quarter_turns` counterclockwise 90 degree turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GeomTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl GeomTransform {
    /// Independent 50% flips; any quarter turn for square images, 0 or 180 degrees otherwise.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let quarter_turns = if square {
            rng.random_range(0..4u8)
        } else {
            2 * rng.random_range(0..2u8)
        };
        Self {
            hflip,
            vflip,
            quarter_turns,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.quarter_turns % 4 == 0
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Destination of pixel `(y, x)` of an `h x w` grid.
    pub fn map(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let x = if self.hflip { w - 1 - x } else { x };
        let y = if self.vflip { h - 1 - y } else { y };
        let (mut y, mut x, mut h, mut w) = (y, x, h, w);
        for _ in 0..self.quarter_turns % 4 {
            (y, x) = (w - 1 - x, y);
            (h, w) = (w, h);
        }
        (y, x)
    }

    pub fn apply_plane<V: Copy + Default>(&self, src: &[V], h: usize, w: usize) -> Vec<V> {
        let (_, w2) = self.output_dims(h, w);
        let mut out = vec![V::default(); src.len()];
        for y in 0..h {
            for x in 0..w {
                let (y2, x2) = self.map(y, x, h, w);
                out[y2 * w2 + x2] = src[y * w + x];
            }
        }
        out
    }

    pub fn apply(&self, s: &Sample) -> Sample {
        let (h, w) = (s.image.height, s.image.width);
        let (h2, w2) = self.output_dims(h, w);
        let data = s
            .image
            .data
            .chunks_exact(h * w)
            .flat_map(|plane| self.apply_plane(plane, h, w))
            .collect();
        Sample {
            id: s.id.clone(),
            image: Image {
                channels: s.image.channels,
                height: h2,
                width: w2,
                data,
            },
            mask: Mask {
                height: h2,
                width: w2,
                data: self.apply_plane(&s.mask.data, h, w),
            },
        }
    }
}

pub fn augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R) -> Sample {
    let square = s.image.height == s.image.width;
    GeomTransform::draw(rng, square).apply(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> Sample {
        let mut mask = vec![0u8; h * w];
        // an L-shaped object off-centre so every transform moves it
        for (y, x) in [(1, 1), (1, 2), (1, 3), (2, 1), (3, 1)] {
            mask[y * w + x] = 1;
        }
        Sample {
            id: "s".into(),
            image: Image {
                channels: 2,
                height: h,
                width: w,
                data: (0..2 * h * w).map(|i| i as f32 / (2 * h * w) as f32).collect(),
            },
            mask: Mask {
                height: h,
                width: w,
                data: mask,
            },
        }
    }

    fn centroid(m: &Mask) -> (f64, f64) {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 0..m.height {
            for x in 0..m.width {
                if m.data[y * m.width + x] > 0 {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1.0;
                }
            }
        }
        (sy / n, sx / n)
    }

    #[test]
    fn identity_and_involution() {
        let s = sample(6, 6);
        assert_eq!(GeomTransform::default().apply(&s), s);
        let h = GeomTransform {
            hflip: true,
            ..Default::default()
        };
        assert_eq!(h.apply(&h.apply(&s)), s);
        let r = GeomTransform {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut x = s.clone();
        for _ in 0..4 {
            x = r.apply(&x);
        }
        assert_eq!(x, s);
    }

    #[test]
    fn image_and_mask_stay_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (h, w) in [(6, 6), (6, 8)] {
            let s = sample(h, w);
            let (cy, cx) = centroid(&s.mask);
            for _ in 0..40 {
                let t = GeomTransform::draw(&mut rng, h == w);
                let a = t.apply(&s);
                // the pixel map is affine, so it carries the centroid exactly
                let at = |y, x| {
                    let (a, b) = t.map(y, x, h, w);
                    (a as f64, b as f64)
                };
                let (by, bx) = at(0, 0);
                let (uy, ux) = at(1, 0);
                let (vy, vx) = at(0, 1);
                let ey = by + cy * (uy - by) + cx * (vy - by);
                let ex = bx + cy * (ux - bx) + cx * (vx - bx);
                let (ay, ax) = centroid(&a.mask);
                assert!((ay - ey).abs() < 1e-9 && (ax - ex).abs() < 1e-9, "{t:?}");
                // every pixel keeps its class and its image value
                let (h2, w2) = t.output_dims(h, w);
                for y in 0..h {
                    for x in 0..w {
                        let (y2, x2) = t.map(y, x, h, w);
                        assert_eq!(a.mask.data[y2 * w2 + x2], s.mask.data[y * w + x]);
                        assert_eq!(a.image.data[h2 * w2 + y2 * w2 + x2], s.image.data[h * w + y * w + x]);
                    }
                }
            }
        }
    }

    #[test]
    fn non_square_images_keep_their_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample(6, 8);
        for _ in 0..20 {
            let a = augment(&s, &mut rng);
            assert_eq!((a.image.height, a.image.width), (6, 8));
        }
    }
}

//! Overlap and boundary-distance metrics on binary masks.

use serde::{Deserialize, Serialize};

/// `2|P & G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice_score(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice_score needs equal shapes");
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Mask pixels with a 4-neighbour outside the mask; pixels beyond the image border count as outside.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            mask[i] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]].is_infinite() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let (mut col, mut tmp) = (vec![0.0; h], vec![0.0; h]);
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Percentile with linear interpolation between closest ranks (`q` in `[0, 100]`).
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// 95th percentile of the symmetric boundary-to-boundary nearest distances.
/// One empty mask gives the image diagonal; two empty masks give 0.
pub fn hd95(pred: &[bool], gt: &[bool], h: usize, w: usize, spacing: f64) -> f64 {
    assert_eq!(pred.len(), h * w, "hd95 prediction shape");
    assert_eq!(gt.len(), h * w, "hd95 ground-truth shape");
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    let (np, ng) = (bp.iter().any(|&b| b), bg.iter().any(|&b| b));
    match (np, ng) {
        (false, false) => return 0.0,
        (true, false) | (false, true) => return ((h * h + w * w) as f64).sqrt() * spacing,
        _ => {}
    }
    let (dg, dp) = (squared_edt(&bg, h, w), squared_edt(&bp, h, w));
    let mut d: Vec<f64> = (0..h * w)
        .filter(|&i| bp[i])
        .map(|i| dg[i])
        .chain((0..h * w).filter(|&i| bg[i]).map(|i| dp[i]))
        .map(|s| s.sqrt() * spacing)
        .collect();
    percentile(&mut d, 95.0)
}

/// Dice and HD95 for one foreground class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u8,
    pub dice: f64,
    pub hd95: f64,
}

/// Scores of every foreground class `1..K` on binarized masks, plus their averages.
pub fn class_scores(pred: &[u8], gt: &[u8], h: usize, w: usize, classes: usize) -> (Vec<ClassScore>, f64, f64) {
    let scores: Vec<ClassScore> = (1..classes as u8)
        .map(|c| {
            let p: Vec<bool> = pred.iter().map(|&v| v == c).collect();
            let g: Vec<bool> = gt.iter().map(|&v| v == c).collect();
            ClassScore {
                class: c,
                dice: dice_score(&p, &g),
                hd95: hd95(&p, &g, h, w, 1.0),
            }
        })
        .collect();
    let n = scores.len().max(1) as f64;
    let dice = scores.iter().map(|s| s.dice).sum::<f64>() / n;
    let hd = scores.iter().map(|s| s.hd95).sum::<f64>() / n;
    (scores, dice, hd)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, on: &[(usize, usize)]) -> Vec<bool> {
        let mut m = vec![false; h * w];
        on.iter().for_each(|&(y, x)| m[y * w + x] = true);
        m
    }

    #[test]
    fn dice_hand_cases() {
        let a = grid(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(dice_score(&a, &a), 1.0);
        assert_eq!(dice_score(&a, &grid(3, 3, &[(2, 2)])), 0.0);
        assert_eq!(dice_score(&grid(3, 3, &[]), &grid(3, 3, &[])), 1.0);
        let p = grid(1, 3, &[(0, 0), (0, 1)]);
        let g = grid(1, 3, &[(0, 1), (0, 2)]);
        assert_eq!(dice_score(&p, &g), 0.5);
    }

    #[test]
    fn hd95_hand_cases() {
        let a = grid(5, 5, &[(1, 1), (1, 2), (2, 2)]);
        assert_eq!(hd95(&a, &a, 5, 5, 1.0), 0.0);
        let p = grid(5, 5, &[(2, 1)]);
        let g = grid(5, 5, &[(2, 2)]);
        assert_eq!(hd95(&p, &g, 5, 5, 1.0), 1.0);
        assert_eq!(hd95(&p, &g, 5, 5, 0.5), 0.5);
        let empty = grid(5, 5, &[]);
        assert_eq!(hd95(&empty, &empty, 5, 5, 1.0), 0.0);
        let one = grid(3, 4, &[(1, 1)]);
        assert_eq!(hd95(&one, &grid(3, 4, &[]), 3, 4, 1.0), 5.0);
    }

    #[test]
    fn boundary_treats_border_as_outside() {
        let full = vec![true; 9];
        let b = boundary(&full, 3, 3);
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
        assert!(!b[4]);
    }

    #[test]
    fn edt_matches_brute_force() {
        let (h, w) = (7, 9);
        let sites = grid(h, w, &[(0, 0), (3, 4), (6, 8), (6, 1)]);
        let d = squared_edt(&sites, h, w);
        for y in 0..h {
            for x in 0..w {
                let best = (0..h * w)
                    .filter(|&i| sites[i])
                    .map(|i| {
                        let (dy, dx) = ((i / w) as f64 - y as f64, (i % w) as f64 - x as f64);
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d[y * w + x], best);
            }
        }
    }

    #[test]
    fn mean_std_of_known_values() {
        assert_eq!(mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), (5.0, 2.0));
    }

    #[test]
    fn class_scores_average_foreground_classes() {
        let gt = [0u8, 1, 1, 2, 2, 0];
        let pred = [0u8, 1, 0, 2, 2, 2];
        let (s, dice, _) = class_scores(&pred, &gt, 2, 3, 3);
        assert_eq!(s.len(), 2);
        assert!((s[0].dice - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[1].dice - 0.8).abs() < 1e-12);
        assert!((dice - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    }
}

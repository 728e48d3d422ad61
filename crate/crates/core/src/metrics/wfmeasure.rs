//! Weighted F-measure.
//!
//! 1. `E = |pred − gt|`. Each background pixel takes the error of its nearest
//!    foreground pixel (exact Euclidean distance transform).
//! 2. The propagated error is smoothed with a normalized 7×7 Gaussian
//!    (σ = 5, zero padding). Inside the foreground, the smaller of the raw
//!    and smoothed error is kept.
//! 3. Background errors are weighted by `2 − exp(ln(0.5)/5 · dist)`.
//! 4. Weighted precision and recall are combined with β = 1.
//!
//! An empty ground truth scores 0.

use super::{MaskGrid, EPS};
use crate::error::Result;

const KERNEL_SIZE: usize = 7;
const KERNEL_SIGMA: f64 = 5.0;
const BETA: f64 = 1.0;

pub fn f_weighted_beta(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    pred.check_pair(gt)?;
    let (h, w) = (gt.height(), gt.width());
    let fg = gt.foreground();
    let n_fg = fg.iter().filter(|x| **x).count();
    if n_fg == 0 {
        return Ok(0.0);
    }
    let (dist, nearest) = edt_with_indices(&fg, h, w);

    let err: Vec<f64> = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, g)| (p - g).abs())
        .collect();
    let propagated: Vec<f64> = (0..h * w)
        .map(|k| if fg[k] { err[k] } else { err[nearest[k].unwrap_or(k)] })
        .collect();
    let smoothed = convolve_zero_padded(&propagated, h, w, &gaussian_kernel());

    let mut tp_w = n_fg as f64;
    let mut fp_w = 0.0;
    let mut fg_err_sum = 0.0;
    for k in 0..h * w {
        if fg[k] {
            let e = if smoothed[k] < err[k] { smoothed[k] } else { err[k] };
            tp_w -= e;
            fg_err_sum += e;
        } else {
            let importance = 2.0 - ((0.5f64).ln() / 5.0 * dist[k]).exp();
            fp_w += err[k] * importance;
        }
    }
    let recall = 1.0 - fg_err_sum / n_fg as f64;
    let precision = tp_w / (tp_w + fp_w + EPS);
    let q = (1.0 + BETA) * recall * precision / (recall + BETA * precision + EPS);
    Ok(q.clamp(0.0, 1.0))
}

fn gaussian_kernel() -> Vec<f64> {
    let m = (KERNEL_SIZE / 2) as f64;
    let mut k: Vec<f64> = (0..KERNEL_SIZE * KERNEL_SIZE)
        .map(|idx| {
            let y = (idx / KERNEL_SIZE) as f64 - m;
            let x = (idx % KERNEL_SIZE) as f64 - m;
            (-(x * x + y * y) / (2.0 * KERNEL_SIGMA * KERNEL_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_zero_padded(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (KERNEL_SIZE / 2) as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for a in 0..KERNEL_SIZE as isize {
                let y = i + a - half;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for b in 0..KERNEL_SIZE as isize {
                    let x = j + b - half;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    acc += kernel[(a as usize) * KERNEL_SIZE + b as usize]
                        * src[(y as usize) * w + x as usize];
                }
            }
            out[(i as usize) * w + j as usize] = acc;
        }
    }
    out
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel of
/// `features` (row-major `h × w`), with the flat index of that pixel.
///
/// Separable lower-envelope algorithm: a column pass finds the nearest feature
/// row per column, then a row pass takes the lower envelope of the parabolas
/// `(x − q)² + g(q)²`. Ties go to the smaller row, then the smaller column.
/// With no features at all, distances are infinite and indices `None`.
pub fn edt_with_indices(features: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    assert_eq!(features.len(), h * w, "feature map size");
    // Column pass: nearest feature row in the same column.
    let mut near_row: Vec<Option<usize>> = vec![None; h * w];
    for j in 0..w {
        let mut last: Option<usize> = None;
        for i in 0..h {
            if features[i * w + j] {
                last = Some(i);
            }
            near_row[i * w + j] = last;
        }
        let mut next: Option<usize> = None;
        for i in (0..h).rev() {
            if features[i * w + j] {
                next = Some(i);
            }
            let k = i * w + j;
            near_row[k] = match (near_row[k], next) {
                (Some(up), Some(down)) => Some(if down - i < i - up { down } else { up }),
                (a, b) => a.or(b),
            };
        }
    }

    let mut dist = vec![f64::INFINITY; h * w];
    let mut nearest = vec![None; h * w];
    let mut sites: Vec<usize> = Vec::with_capacity(w);
    let mut v: Vec<usize> = Vec::with_capacity(w);
    let mut z: Vec<f64> = Vec::with_capacity(w + 1);
    for i in 0..h {
        let cost = |q: usize| {
            let r = near_row[i * w + q].expect("site has a feature");
            let d = r.abs_diff(i) as f64;
            d * d
        };
        sites.clear();
        sites.extend((0..w).filter(|&q| near_row[i * w + q].is_some()));
        if sites.is_empty() {
            continue;
        }
        v.clear();
        z.clear();
        v.push(sites[0]);
        z.push(f64::NEG_INFINITY);
        z.push(f64::INFINITY);
        for &q in &sites[1..] {
            let fq = cost(q) + (q * q) as f64;
            let s = loop {
                let p = *v.last().unwrap();
                let s = (fq - (cost(p) + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[v.len() - 1] {
                    v.pop();
                    z.pop();
                } else {
                    break s;
                }
            };
            let last = z.len() - 1;
            z[last] = s;
            v.push(q);
            z.push(f64::INFINITY);
        }
        let mut k = 0;
        for x in 0..w {
            while z[k + 1] < x as f64 {
                k += 1;
            }
            let q = v[k];
            let r = near_row[i * w + q].unwrap();
            let dx = q.abs_diff(x) as f64;
            let dy = r.abs_diff(i) as f64;
            dist[i * w + x] = (dx * dx + dy * dy).sqrt();
            nearest[i * w + x] = Some(r * w + q);
        }
    }
    (dist, nearest)
}

//! Structure measure: `α·S_object + (1 − α)·S_region` with α = 0.5.
//!
//! The region term splits the map at the rounded foreground centroid
//! (round-half-to-even, then +1 so the split index is inclusive of the
//! centroid row/column) and weights each quadrant's SSIM by its area.
//! Quadrants with zero area carry zero weight and are skipped.

use super::{MaskGrid, EPS};
use crate::error::{Error, Result};

const ALPHA: f64 = 0.5;

pub fn s_measure(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    pred.check_pair(gt)?;
    let fg = gt.foreground();
    let n_fg = fg.iter().filter(|x| **x).count();
    if n_fg == 0 {
        return Ok((1.0 - pred.mean()).clamp(0.0, 1.0));
    }
    if n_fg == fg.len() {
        return Ok(pred.mean().clamp(0.0, 1.0));
    }
    let object = object_score(pred.values(), &fg, n_fg as f64 / fg.len() as f64);
    let region = region_score(pred, gt, &fg)?;
    Ok((ALPHA * object + (1.0 - ALPHA) * region).clamp(0.0, 1.0))
}

fn s_object(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn object_score(pred: &[f64], fg: &[bool], gt_mean: f64) -> f64 {
    let inside: Vec<f64> = pred.iter().zip(fg).filter(|(_, f)| **f).map(|(p, _)| *p).collect();
    let outside: Vec<f64> = pred
        .iter()
        .zip(fg)
        .filter(|(_, f)| !**f)
        .map(|(p, _)| 1.0 - p)
        .collect();
    s_object(&inside) * gt_mean + s_object(&outside) * (1.0 - gt_mean)
}

fn region_score(pred: &MaskGrid, gt: &MaskGrid, fg: &[bool]) -> Result<f64> {
    let (h, w) = (gt.height(), gt.width());
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for (k, _) in fg.iter().enumerate().filter(|(_, f)| **f) {
        sy += (k / w) as f64;
        sx += (k % w) as f64;
        n += 1.0;
    }
    let cy = (sy / n).round_ties_even() as usize + 1;
    let cx = (sx / n).round_ties_even() as usize + 1;
    if cy > h || cx > w {
        return Err(Error::shape("centroid outside the mask"));
    }
    let area = (h * w) as f64;
    let w_lt = (cx * cy) as f64 / area;
    let w_rt = (cy * (w - cx)) as f64 / area;
    let w_lb = ((h - cy) * cx) as f64 / area;
    let w_rb = 1.0 - w_lt - w_rt - w_lb;
    let quads = [
        (0..cy, 0..cx, w_lt),
        (0..cy, cx..w, w_rt),
        (cy..h, 0..cx, w_lb),
        (cy..h, cx..w, w_rb),
    ];
    let mut score = 0.0;
    for (rows, cols, weight) in quads {
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let mut p = Vec::with_capacity(rows.len() * cols.len());
        let mut g = Vec::with_capacity(p.capacity());
        for i in rows {
            for j in cols.clone() {
                p.push(pred.get(i, j));
                g.push(gt.get(i, j));
            }
        }
        score += ssim(&p, &g) * weight;
    }
    Ok(score)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let denom = n - 1.0 + EPS;
    let sigma_x = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / denom;
    let sigma_y = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / denom;
    let sigma_xy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * sigma_xy;
    let beta = (x * x + y * y) * (sigma_x + sigma_y);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

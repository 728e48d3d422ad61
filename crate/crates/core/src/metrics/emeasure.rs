//! Enhanced-alignment measure on binary maps.
//!
//! With `φ_p = p − mean(p)` and `φ_g = g − mean(g)`, the alignment at each
//! pixel is `2·φ_p·φ_g / (φ_p² + φ_g²)` and the enhanced value is
//! `(align + 1)² / 4`. The score is the mean over all pixels. Since both maps
//! are binary, the sum is evaluated over the four (pred, gt) pixel classes.
//!
//! Degenerate ground truth: all background scores the fraction of predicted
//! background pixels; all foreground scores the fraction of predicted
//! foreground pixels.

use super::{MaskGrid, EPS};
use crate::error::Result;

pub fn e_measure(pred_bin: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    pred_bin.check_pair(gt)?;
    let p = pred_bin.foreground();
    let g = gt.foreground();
    let n = p.len();
    let count = |a: bool, b: bool| p.iter().zip(&g).filter(|(x, y)| **x == a && **y == b).count();
    let (fg_fg, fg_bg, bg_fg, bg_bg) = (
        count(true, true),
        count(true, false),
        count(false, true),
        count(false, false),
    );
    let pred_fg = fg_fg + fg_bg;
    let gt_fg = fg_fg + bg_fg;

    let sum = if gt_fg == 0 {
        (n - pred_fg) as f64
    } else if gt_fg == n {
        pred_fg as f64
    } else {
        let mp = pred_fg as f64 / n as f64;
        let mg = gt_fg as f64 / n as f64;
        let parts = [
            (fg_fg, 1.0 - mp, 1.0 - mg),
            (fg_bg, 1.0 - mp, -mg),
            (bg_fg, -mp, 1.0 - mg),
            (bg_bg, -mp, -mg),
        ];
        parts
            .iter()
            .map(|&(count, a, b)| {
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                count as f64 * (align + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    Ok(sum / n as f64)
}

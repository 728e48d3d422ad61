//! Class-aware segmentation metrics.
//!
//! Every metric is computed on a (prediction, ground truth) mask pair and then
//! gated by classification: when the predicted class differs from the true
//! class, the ↑ metrics score 0 and MAE scores 1.
//!
//! Conventions:
//! - Fβ uses β² = 0.3 with adaptive binarization `t = min(2·mean, 1)`.
//! - IoU binarizes the prediction at a fixed 0.5.
//! - Em binarizes adaptively, then averages the enhanced-alignment matrix over
//!   all pixels.
//! - Fωβ uses a 7×7 Gaussian (σ = 5, zero padding), nearest-foreground error
//!   propagation, importance `2 − exp(ln(0.5)/5 · dist)` and β = 1.
//! - Sm uses α = 0.5.

mod emeasure;
mod smeasure;
mod wfmeasure;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use emeasure::e_measure;
pub use smeasure::s_measure;
pub use wfmeasure::{edt_with_indices, f_weighted_beta};

/// Machine epsilon for f64, used as a denominator guard.
pub(crate) const EPS: f64 = f64::EPSILON;

/// 2D map with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("mask must be at least 1x1, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("mask value {v} outside [0, 1]")));
        }
        Ok(MaskGrid {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Result<Self> {
        MaskGrid::new(height, width, vec![v; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height * width).map(|k| f(k / width, k % width)).collect();
        MaskGrid::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `1 − m` elementwise.
    pub fn inverted(&self) -> MaskGrid {
        MaskGrid {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
        }
    }

    pub(crate) fn foreground(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= 0.5).collect()
    }

    fn check_pair(&self, other: &MaskGrid) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Thresholding rule for turning a continuous map into a binary one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    /// `v ≥ t → 1`.
    Fixed(f64),
    /// `t = min(2·mean, 1)`; an all-zero map stays all zero.
    Adaptive,
}

pub fn binarize(m: &MaskGrid, mode: Binarize) -> MaskGrid {
    let t = match mode {
        Binarize::Fixed(t) => t,
        Binarize::Adaptive => {
            let mean = m.mean();
            if mean == 0.0 {
                f64::INFINITY
            } else {
                (2.0 * mean).min(1.0)
            }
        }
    };
    MaskGrid {
        height: m.height,
        width: m.width,
        values: m.values.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect(),
    }
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn iou(pred_bin: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    pred_bin.check_pair(gt)?;
    let (p, g) = (pred_bin.foreground(), gt.foreground());
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
    let union = p.iter().zip(&g).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn mae(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    pred.check_pair(gt)?;
    let sum: f64 = pred.values.iter().zip(&gt.values).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// F-measure of binary masks; 1 when both are empty, 0 when either
/// precision or recall is undefined or zero.
pub fn f_beta(pred_bin: &MaskGrid, gt: &MaskGrid, beta2: f64) -> Result<f64> {
    pred_bin.check_pair(gt)?;
    let (p, g) = (pred_bin.foreground(), gt.foreground());
    let n_pred = p.iter().filter(|x| **x).count();
    let n_gt = g.iter().filter(|x| **x).count();
    if n_pred == 0 && n_gt == 0 {
        return Ok(1.0);
    }
    let tp = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / n_pred as f64;
    let recall = tp as f64 / n_gt as f64;
    Ok((1.0 + beta2) * precision * recall / (beta2 * precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub beta2: f64,
    pub fbeta_binarize: Binarize,
    pub em_binarize: Binarize,
    pub iou_binarize: Binarize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            beta2: 0.3,
            fbeta_binarize: Binarize::Adaptive,
            em_binarize: Binarize::Adaptive,
            iou_binarize: Binarize::Fixed(0.5),
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta2 > 0.0 && self.beta2.is_finite()) {
            return Err(Error::Config(format!("metrics.beta2 must be > 0, got {}", self.beta2)));
        }
        for (name, b) in [
            ("fbeta_binarize", self.fbeta_binarize),
            ("em_binarize", self.em_binarize),
            ("iou_binarize", self.iou_binarize),
        ] {
            if let Binarize::Fixed(t) = b {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Config(format!("metrics.{name} threshold {t} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// One scored mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub pred: MaskGrid,
    pub gt: MaskGrid,
    pub pred_class: String,
    pub true_class: String,
}

/// The six metric values in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub sm: f64,
    pub wfm: f64,
    pub mae: f64,
    pub fbeta: f64,
    pub em: f64,
    pub iou: f64,
}

impl MetricValues {
    /// Scores assigned when the class is wrong.
    pub const GATED: MetricValues = MetricValues {
        sm: 0.0,
        wfm: 0.0,
        mae: 1.0,
        fbeta: 0.0,
        em: 0.0,
        iou: 0.0,
    };

    pub fn as_array(&self) -> [f64; 6] {
        [self.sm, self.wfm, self.mae, self.fbeta, self.em, self.iou]
    }

    fn from_array(a: [f64; 6]) -> Self {
        MetricValues {
            sm: a[0],
            wfm: a[1],
            mae: a[2],
            fbeta: a[3],
            em: a[4],
            iou: a[5],
        }
    }
}

pub const COLUMN_NAMES: [&str; 6] = ["cSm", "cFωβ", "cMAE", "cFβ", "cEm", "cIoU"];

/// Class-agnostic metrics of one mask pair.
pub fn mask_metrics(pred: &MaskGrid, gt: &MaskGrid, cfg: &MetricsConfig) -> Result<MetricValues> {
    pred.check_pair(gt)?;
    if !gt.is_binary() {
        return Err(Error::domain("ground-truth mask is not binary"));
    }
    Ok(MetricValues {
        sm: s_measure(pred, gt)?,
        wfm: f_weighted_beta(pred, gt)?,
        mae: mae(pred, gt)?,
        fbeta: f_beta(&binarize(pred, cfg.fbeta_binarize), gt, cfg.beta2)?,
        em: e_measure(&binarize(pred, cfg.em_binarize), gt)?,
        iou: iou(&binarize(pred, cfg.iou_binarize), gt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub pred_class: String,
    pub true_class: String,
    pub class_correct: bool,
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gated: bool,
    pub count: usize,
    pub correct: usize,
    pub classification_accuracy: f64,
    pub means: MetricValues,
    /// Sorted by id.
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    /// Aligned plain-text table in the order cSm cFωβ cMAE cFβ cEm cIoU.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = COLUMN_NAMES.iter().map(|c| format!("{c:>8}")).collect();
        let _ = writeln!(out, "{}", header.join(" "));
        let row: Vec<String> = self.means.as_array().iter().map(|v| format!("{v:>8.4}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
        let _ = writeln!(
            out,
            "samples {}  class accuracy {:.4} ({}/{})",
            self.count, self.classification_accuracy, self.correct, self.count
        );
        out
    }
}

/// Per-sample metrics gated by exact class-name match, plus unweighted means.
pub fn class_aware_report(pairs: &[EvalPair], cfg: &MetricsConfig) -> Result<MetricReport> {
    build_report(pairs, cfg, true)
}

/// The same report without class gating.
pub fn class_agnostic_report(pairs: &[EvalPair], cfg: &MetricsConfig) -> Result<MetricReport> {
    build_report(pairs, cfg, false)
}

fn build_report(pairs: &[EvalPair], cfg: &MetricsConfig, gated: bool) -> Result<MetricReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no mask pairs to evaluate".into()));
    }
    let mut order: Vec<&EvalPair> = pairs.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = order.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Data(format!("duplicate pair id '{}'", w[0].id)));
    }

    let mut samples = Vec::with_capacity(order.len());
    for pair in order {
        let class_correct = pair.pred_class == pair.true_class;
        let values = if gated && !class_correct {
            pair.pred.check_pair(&pair.gt).map_err(|e| named(pair, e))?;
            MetricValues::GATED
        } else {
            mask_metrics(&pair.pred, &pair.gt, cfg).map_err(|e| named(pair, e))?
        };
        samples.push(SampleMetrics {
            id: pair.id.clone(),
            pred_class: pair.pred_class.clone(),
            true_class: pair.true_class.clone(),
            class_correct,
            values,
        });
    }

    let n = samples.len() as f64;
    let mut sums = [0.0; 6];
    for s in &samples {
        for (acc, v) in sums.iter_mut().zip(s.values.as_array()) {
            *acc += v;
        }
    }
    let correct = samples.iter().filter(|s| s.class_correct).count();
    Ok(MetricReport {
        gated,
        count: samples.len(),
        correct,
        classification_accuracy: correct as f64 / n,
        means: MetricValues::from_array(sums.map(|s| s / n)),
        samples,
    })
}

fn named(pair: &EvalPair, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("pair '{}': {m}", pair.id)),
        Error::Domain(m) => Error::Domain(format!("pair '{}': {m}", pair.id)),
        other => other,
    }
}

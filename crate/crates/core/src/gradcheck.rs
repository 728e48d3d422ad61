//! Finite-difference check of the end-to-end training gradient.
//!
//! Each sampled configuration draws an adapter, a prompt table, a small batch
//! of images and a temperature, then compares every entry of the analytic
//! gradient of the mean batch loss against central differences.
//!
//! Two things are not compared. A configuration is excluded when some prompt
//! has a pre-activation within `kink` of zero. An entry is skipped when the
//! `±h` perturbation changes any ReLU pattern, since the difference quotient
//! then straddles a kink.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, ForwardTrace};
use crate::classification::PromptTable;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, Mat64, Rng, Vec64};
use crate::training::batch_gradient;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Accepted configurations to check.
    pub configs: usize,
    pub seed: u64,
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub kink: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            configs: 100,
            seed: 0,
            h: 1e-3,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            kink: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradFailure {
    pub config: usize,
    pub d: usize,
    pub r: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub accepted: usize,
    /// Configurations discarded for a near-zero pre-activation.
    pub excluded: usize,
    pub entries_checked: usize,
    /// Entries whose perturbation flipped a ReLU.
    pub entries_skipped: usize,
    /// Entries large enough to report whose difference exceeded the
    /// absolute floor, i.e. that were judged by the relative test alone.
    pub entries_relative: usize,
    /// Largest relative error over entries with magnitude ≥ 1e-6.
    pub max_rel_error: f64,
    pub failures: Vec<GradFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.accepted == self.config.configs
    }
}

const REPORT_SCALE: f64 = 1e-6;
const WEIGHT_SIGMA: f64 = 0.2;

struct Instance {
    p: AdapterParams,
    prompts: PromptTable,
    images: Vec<(Vec64, usize)>,
    tau: f64,
}

fn draw_instance(rng: &mut Rng, weight_sigma: f64) -> Result<Instance> {
    let d = 4 + rng.below(13);
    let r = 1 + rng.below(4);
    let k = 2 + rng.below(3);
    let n = 1 + rng.below(3);
    let tau = 0.5 + 1.5 * rng.next_f64();
    // Along one coordinate the adapter output moves linearly, and the
    // difference quotient's truncation error grows with that step relative
    // to |y|. Weights at this scale keep it near 1e-5 of the gradient.
    let mut mat = |rows, cols| -> Result<Mat64> {
        Mat64::from_vec(rows, cols, gaussian_sample(rng, 0.0, weight_sigma, rows * cols)?.into_inner())
    };
    let (w_down, w_mid, w_up) = (mat(r, d)?, mat(r, r)?, mat(d, r)?);
    let s = 0.25 + rng.next_f64();
    let p = AdapterParams::new(w_down, w_mid, w_up, s)?;
    let prompts = PromptTable::new(
        (0..k)
            .map(|c| Ok((format!("c{c}"), gaussian_sample(rng, 0.0, 1.0, d)?)))
            .collect::<Result<_>>()?,
    )?;
    let images = (0..n)
        .map(|_| Ok((gaussian_sample(rng, 0.0, 1.0, d)?.normalized()?, rng.below(k))))
        .collect::<Result<_>>()?;
    Ok(Instance { p, prompts, images, tau })
}

fn traces(p: &AdapterParams, prompts: &PromptTable) -> Result<Vec<ForwardTrace>> {
    prompts.features().iter().map(|z| p.forward(z)).collect()
}

fn relu_pattern(t: &[ForwardTrace]) -> Vec<bool> {
    t.iter()
        .flat_map(|t| t.pre1.iter().chain(t.pre2.iter()).map(|&x| x > 0.0))
        .collect()
}

/// Mean batch loss and the ReLU pattern it was evaluated under.
fn loss_at(inst: &Instance, p: &AdapterParams) -> Result<(f64, Vec<bool>)> {
    let batch: Vec<(&[f64], usize)> = inst.images.iter().map(|(v, c)| (v.as_ref(), *c)).collect();
    let res = batch_gradient(p, &inst.prompts, &batch, inst.tau)?;
    Ok((
        res.loss_sum / batch.len() as f64,
        relu_pattern(&traces(p, &inst.prompts)?),
    ))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.h > 0.0 && cfg.rel_tol > 0.0 && cfg.abs_floor >= 0.0 && cfg.kink >= 0.0) {
        return Err(Error::Config(
            "gradcheck needs h > 0, rel_tol > 0, abs_floor >= 0 and kink >= 0".into(),
        ));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut report = GradcheckReport {
        config: *cfg,
        accepted: 0,
        excluded: 0,
        entries_checked: 0,
        entries_skipped: 0,
        entries_relative: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    // Bounded so a pathological kink threshold cannot loop forever.
    let max_draws = 100 * cfg.configs.max(1);
    let mut draws = 0;
    while report.accepted < cfg.configs && draws < max_draws {
        draws += 1;
        let inst = draw_instance(&mut rng, WEIGHT_SIGMA)?;
        let base = traces(&inst.p, &inst.prompts)?;
        let min_pre = base
            .iter()
            .map(ForwardTrace::min_abs_preactivation)
            .fold(f64::INFINITY, f64::min);
        if min_pre < cfg.kink {
            report.excluded += 1;
            continue;
        }
        let index = report.accepted;
        report.accepted += 1;
        let pattern = relu_pattern(&base);
        let batch: Vec<(&[f64], usize)> =
            inst.images.iter().map(|(v, c)| (v.as_ref(), *c)).collect();
        let grads = batch_gradient(&inst.p, &inst.prompts, &batch, inst.tau)?.grads;

        for i in 0..inst.p.param_count() {
            let x = inst.p.flat_get(i);
            let mut q = inst.p.clone();
            q.flat_set(i, x + cfg.h);
            let (lp, pat_p) = loss_at(&inst, &q)?;
            q.flat_set(i, x - cfg.h);
            let (lm, pat_m) = loss_at(&inst, &q)?;
            if pat_p != pattern || pat_m != pattern {
                report.entries_skipped += 1;
                continue;
            }
            report.entries_checked += 1;
            let numeric = (lp - lm) / (2.0 * cfg.h);
            let analytic = grads.flat_get(i);
            let diff = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            if scale >= REPORT_SCALE {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.entries_relative += usize::from(diff > cfg.abs_floor);
            }
            if diff > cfg.abs_floor && rel >= cfg.rel_tol {
                report.failures.push(GradFailure {
                    config: index,
                    d: inst.p.d(),
                    r: inst.p.r(),
                    entry: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_counts() {
        let cfg = GradcheckConfig {
            configs: 5,
            seed: 3,
            ..GradcheckConfig::default()
        };
        let rep = run_gradcheck(&cfg).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
        assert_eq!(rep.accepted, 5);
        assert!(rep.entries_checked > 0);
    }

    #[test]
    fn detects_a_wrong_tolerance() {
        // A tolerance no real difference quotient can meet must report failures.
        let cfg = GradcheckConfig {
            configs: 2,
            rel_tol: 1e-15,
            abs_floor: 0.0,
            ..GradcheckConfig::default()
        };
        assert!(!run_gradcheck(&cfg).unwrap().passed());
    }

    /// At larger weights the three-point quotient is too coarse for 1e-4 on
    /// small entries, so compare against the fourth-order stencil instead.
    #[test]
    fn five_point_stencil_agrees_at_larger_weights() {
        let mut rng = Rng::new(77);
        let h = 1e-3;
        let mut checked = 0;
        for _ in 0..40 {
            let inst = draw_instance(&mut rng, 0.5).unwrap();
            let base = traces(&inst.p, &inst.prompts).unwrap();
            if base.iter().any(|t| t.min_abs_preactivation() < 1e-6) {
                continue;
            }
            let pattern = relu_pattern(&base);
            let batch: Vec<(&[f64], usize)> =
                inst.images.iter().map(|(v, c)| (v.as_ref(), *c)).collect();
            let g = batch_gradient(&inst.p, &inst.prompts, &batch, inst.tau).unwrap().grads;
            'entry: for i in 0..inst.p.param_count() {
                let x = inst.p.flat_get(i);
                let mut f = [0.0; 4];
                for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                    let mut q = inst.p.clone();
                    q.flat_set(i, x + k * h);
                    let (l, pat) = loss_at(&inst, &q).unwrap();
                    if pat != pattern {
                        continue 'entry;
                    }
                    *slot = l;
                }
                let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h);
                let analytic = g.flat_get(i);
                let diff = (analytic - numeric).abs();
                assert!(
                    diff <= 1e-10 || diff / analytic.abs().max(numeric.abs()) < 1e-6,
                    "entry {i}: analytic {analytic} numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked > 500, "{checked}");
    }

    #[test]
    fn deterministic_for_a_seed() {
        let cfg = GradcheckConfig {
            configs: 3,
            seed: 11,
            ..GradcheckConfig::default()
        };
        assert_eq!(run_gradcheck(&cfg).unwrap(), run_gradcheck(&cfg).unwrap());
    }
}

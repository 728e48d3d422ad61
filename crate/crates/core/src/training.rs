//! SGD-with-momentum fine-tuning of the adapter.
//!
//! Each class prompt `z_c` is pushed through the adapter, and the image is
//! scored against every adapted prompt with `cos(img, y_c) / tau`. The loss is
//! cross-entropy over those logits. Only adapter parameters receive updates;
//! prompt features and image embeddings are read-only.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrads, AdapterParams, ForwardTrace};
use crate::classification::PromptTable;
use crate::dataio::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_sim, dot, norm, Mat64, Rng, Vec64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    /// Apply weight decay to the gate `s` as well as the matrices.
    pub decay_gate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0035,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 10,
            batch_size: 16,
            tau: 0.01,
            seed: 0,
            decay_gate: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("train.tau must be > 0, got {}", self.tau));
        }
        Ok(())
    }
}

/// Velocity buffers for [`sgd_step`], zero at start.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub v_down: Mat64,
    pub v_mid: Mat64,
    pub v_up: Mat64,
    pub v_s: f64,
}

impl MomentumState {
    pub fn zeros(p: &AdapterParams) -> Self {
        MomentumState {
            v_down: Mat64::zeros(p.r(), p.d()),
            v_mid: Mat64::zeros(p.r(), p.r()),
            v_up: Mat64::zeros(p.d(), p.r()),
            v_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Logits of `img` against pre-computed class features (`cos / tau` each).
pub(crate) fn logits_against(img: &[f64], features: &[Vec64], tau: f64) -> Result<Vec64> {
    if features.is_empty() {
        return Err(Error::Data("prompt table is empty".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!("temperature must be > 0, got {tau}")));
    }
    features
        .iter()
        .map(|y| cosine_sim(img, y).map(|c| c / tau))
        .collect()
}

/// Temperature-scaled cosine logits of `img` against every adapted prompt.
pub fn class_logits(
    p: &AdapterParams,
    img: &[f64],
    prompts: &PromptTable,
    tau: f64,
) -> Result<Vec64> {
    let adapted = prompts
        .features()
        .iter()
        .map(|z| p.forward(z).map(|t| t.y))
        .collect::<Result<Vec<_>>>()?;
    logits_against(img, &adapted, tau)
}

/// Cross-entropy of `softmax(logits)` at `true_idx`, with its gradient.
pub fn cross_entropy(logits: &[f64], true_idx: usize) -> Result<(f64, Vec64)> {
    if true_idx >= logits.len() {
        return Err(Error::domain(format!(
            "class index {true_idx} out of range for {} logits",
            logits.len()
        )));
    }
    let top = argmax(logits);
    let m = logits[top];
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    // The max term is exactly 1; summing the rest separately keeps log1p accurate.
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, e)| e)
        .sum();
    let loss = (m - logits[true_idx]) + rest.ln_1p();
    let total = 1.0 + rest;
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[true_idx] -= 1.0;
    Ok((loss, Vec64::new(grad)))
}

/// One momentum SGD update with coupled L2 weight decay.
pub fn sgd_step(p: &mut AdapterParams, g: &AdapterGrads, m: &mut MomentumState, cfg: &TrainConfig) {
    assert!(g.matches(p), "gradient shape does not match adapter");
    let (lr, mu, wd) = (cfg.lr, cfg.momentum, cfg.weight_decay);
    let velocities = [&mut m.v_down, &mut m.v_mid, &mut m.v_up];
    for ((w, grad), v) in p.matrices_mut().into_iter().zip(g.matrices()).zip(velocities) {
        for ((wi, gi), vi) in w
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(v.values_mut())
        {
            *vi = mu * *vi - lr * (gi + wd * *wi);
            *wi += *vi;
        }
    }
    let s = p.s();
    let wd_s = if cfg.decay_gate { wd } else { 0.0 };
    m.v_s = mu * m.v_s - lr * (g.g_s + wd_s * s);
    p.set_s(s + m.v_s);
}

/// Result of scoring a batch: summed loss, number of correct top-1 predictions,
/// and the loss gradient averaged over the batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss_sum: f64,
    pub correct: usize,
    pub grads: AdapterGrads,
}

/// Loss and mean gradient over `(image, class index)` pairs.
pub fn batch_gradient(
    p: &AdapterParams,
    prompts: &PromptTable,
    batch: &[(&[f64], usize)],
    tau: f64,
) -> Result<BatchResult> {
    let traces: Vec<ForwardTrace> = prompts
        .features()
        .iter()
        .map(|z| p.forward(z))
        .collect::<Result<_>>()?;
    let adapted: Vec<Vec64> = traces.iter().map(|t| t.y.clone()).collect();
    let y_norms: Vec<f64> = adapted.iter().map(|y| norm(y)).collect();
    let d = p.d();
    let mut dy = vec![vec![0.0; d]; traces.len()];
    let mut loss_sum = 0.0;
    let mut correct = 0;

    for &(img, label) in batch {
        if img.len() != d {
            return Err(Error::shape(format!(
                "image embedding has dim {}, adapter expects {d}",
                img.len()
            )));
        }
        let logits = logits_against(img, &adapted, tau)?;
        let (loss, dlogits) = cross_entropy(&logits, label)?;
        loss_sum += loss;
        if argmax(&logits) == label {
            correct += 1;
        }
        let img_norm = norm(img);
        for (c, y) in adapted.iter().enumerate() {
            let k = dlogits[c] / tau;
            if k == 0.0 {
                continue;
            }
            let yn = y_norms[c];
            let cos = dot(img, y) / (img_norm * yn);
            let a = k / (img_norm * yn);
            let b = k * cos / (yn * yn);
            for ((acc, &xi), &yi) in dy[c].iter_mut().zip(img).zip(y.iter()) {
                *acc += a * xi - b * yi;
            }
        }
    }

    let mut grads = AdapterGrads::zeros_like(p);
    if !batch.is_empty() {
        let inv = 1.0 / batch.len() as f64;
        for (trace, g) in traces.iter().zip(&mut dy) {
            g.iter_mut().for_each(|v| *v *= inv);
            p.backward_into(trace, g, &mut grads)?;
        }
    }
    Ok(BatchResult {
        loss_sum,
        correct,
        grads,
    })
}

/// Fine-tunes `p0` on `data`. Returns the final parameters and per-epoch history.
pub fn train(
    p0: &AdapterParams,
    prompts: &PromptTable,
    data: &[EmbeddingRecord],
    cfg: &TrainConfig,
) -> Result<(AdapterParams, Vec<EpochStats>)> {
    cfg.validate()?;
    if prompts.dim() != Some(p0.d()) && !prompts.is_empty() {
        return Err(Error::shape(format!(
            "prompt features have dim {}, adapter expects {}",
            prompts.dim().unwrap_or(0),
            p0.d()
        )));
    }
    let mut examples = Vec::with_capacity(data.len());
    for rec in data {
        let label = prompts.index_of(&rec.class).ok_or_else(|| {
            Error::Data(format!("record '{}' has unknown class '{}'", rec.id, rec.class))
        })?;
        if rec.embedding.len() != p0.d() {
            return Err(Error::shape(format!(
                "record '{}' has dim {}, adapter expects {}",
                rec.id,
                rec.embedding.len(),
                p0.d()
            )));
        }
        examples.push((rec.embedding.as_ref(), label));
    }

    let mut p = p0.clone();
    let mut momentum = MomentumState::zeros(&p);
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i]));
            let res = batch_gradient(&p, prompts, &batch, cfg.tau)?;
            loss_sum += res.loss_sum;
            correct += res.correct;
            sgd_step(&mut p, &res.grads, &mut momentum, cfg);
        }
        let n = examples.len().max(1) as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} train_acc {:.4} s {:.6}",
            stats.mean_loss,
            stats.train_accuracy,
            p.s()
        );
        history.push(stats);
    }
    Ok((p, history))
}

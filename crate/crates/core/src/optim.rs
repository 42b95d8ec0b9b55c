//! AdamW with a per-epoch cosine-annealed base rate and a reduced rate for
//! backbone parameters.
//!
//! The non-backbone ("head") group trains at `eta(e)` and the backbone group
//! at `eta(e) * c`, where
//!
//! ```text
//! eta(e) = eta_min + (lr - eta_min) * (1 + cos(pi * (e - 1) / (T - 1))) / 2
//! ```
//!
//! for epochs `e` in `1..=T`. With `T < 2` the schedule is the constant `lr`.
//!
//! The update is AdamW with decoupled weight decay:
//!
//! ```text
//! m <- b1 m + (1 - b1) g;   v <- b2 v + (1 - b2) g^2
//! theta <- theta - lr_group * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
//! ```
//!
//! Weight decay is applied to weight matrices (including the raw ArcFace
//! prototype rows) and never to biases.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Feature extractor layers; trains at the reduced rate.
    Backbone,
    /// Neck and classification head; trains at the full rate.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratifiedLrConfig {
    pub lr: f64,
    /// Backbone reduction factor in `(0, 1]`.
    pub c: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub total_epochs: u32,
    pub eta_min: f64,
    /// Restart the cosine schedule at each training phase instead of
    /// spanning the whole run.
    pub restart_per_phase: bool,
}

impl Default for StratifiedLrConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            c: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            total_epochs: 3,
            eta_min: 0.0,
            restart_per_phase: false,
        }
    }
}

impl StratifiedLrConfig {
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (self.lr.is_finite() && self.lr > 0.0, "lr must be positive"),
            (self.c > 0.0 && self.c <= 1.0, "c must be in (0, 1]"),
            (
                self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
                "weight_decay must be >= 0",
            ),
            (
                self.beta1 > 0.0 && self.beta1 < 1.0,
                "beta1 must be in (0, 1)",
            ),
            (
                self.beta2 > 0.0 && self.beta2 < 1.0,
                "beta2 must be in (0, 1)",
            ),
            (self.epsilon > 0.0, "epsilon must be positive"),
            (
                self.eta_min >= 0.0 && self.eta_min <= self.lr,
                "eta_min must be in [0, lr]",
            ),
        ];
        match problems.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("{msg} ({self:?})"))),
            None => Ok(()),
        }
    }
}

/// `lr_b = lr * c`.
pub fn backbone_lr(cfg: &StratifiedLrConfig) -> f64 {
    cfg.lr * cfg.c
}

/// Cosine-annealed head learning rate for 1-based epoch `epoch`.
pub fn cosine_lr(cfg: &StratifiedLrConfig, epoch: u32) -> Result<f64> {
    cosine_lr_over(cfg, epoch, cfg.total_epochs)
}

pub(crate) fn cosine_lr_over(cfg: &StratifiedLrConfig, epoch: u32, total: u32) -> Result<f64> {
    if total < 2 {
        return Ok(cfg.lr);
    }
    if epoch < 1 || epoch > total {
        return Err(Error::Argument(format!(
            "epoch {epoch} outside [1, {total}]"
        )));
    }
    let progress = (epoch - 1) as f64 / (total - 1) as f64;
    Ok(cfg.eta_min + 0.5 * (cfg.lr - cfg.eta_min) * (1.0 + (PI * progress).cos()))
}

/// `(head_lr, backbone_lr)` for an epoch.
pub fn group_lrs(cfg: &StratifiedLrConfig, epoch: u32) -> Result<(f64, f64)> {
    let eta = cosine_lr(cfg, epoch)?;
    Ok((eta, eta * cfg.c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMoments {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Moment accumulators, one entry per parameter block. Each block keeps its
/// own step count so that blocks skipped while frozen resume with correct
/// bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub blocks: Vec<BlockMoments>,
}

impl AdamWState {
    pub fn new(block_sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            blocks: block_sizes
                .into_iter()
                .map(|n| BlockMoments {
                    step: 0,
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.first.len()).collect()
    }
}

/// One AdamW update of parameter block `block`. Gradients are validated
/// before anything is mutated.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamWState,
    block: usize,
    group_lr: f64,
    apply_decay: bool,
    cfg: &StratifiedLrConfig,
) -> Result<()> {
    let moments = state
        .blocks
        .get_mut(block)
        .ok_or_else(|| Error::Argument(format!("no optimizer state for block {block}")))?;
    if params.len() != grads.len() || params.len() != moments.first.len() {
        return Err(Error::Argument(format!(
            "block {block}: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.first.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in block {block} at index {i}"
        )));
    }
    moments.step += 1;
    let t = moments.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let wd = if apply_decay { cfg.weight_decay } else { 0.0 };
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.first.iter_mut())
        .zip(moments.second.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= group_lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + wd * *p);
    }
    Ok(())
}

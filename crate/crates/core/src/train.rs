//! Transport-path sampling, the Gaussian velocity NLL, and the training loop.
//!
//! The loss on one path point is
//!
//! ```text
//! L = (d/2) * log sigma^2 + ||v - mu||^2 / (2 sigma^2)
//! ```
//!
//! with no additive constants, so L = 0 when mu = v and sigma^2 = 1. The
//! variance term acts as adaptive weighting: large predicted sigma^2 damps
//! the reconstruction penalty but pays the log term, and the per-sample
//! minimum sits at sigma^2 = ||v - mu||^2 / d.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::NoteSample;
use crate::error::{DfmError, Result};
use crate::linalg;
use crate::net::{ConditionSet, NetParams, VelocityDistribution};
use crate::rng::{self, tag};

/// Bounds on log_var when evaluating exp; outside them the variance is
/// pinned and its gradient is zero (the clamp is not differentiated through).
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 5.0;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub v_target: Vec<f64>,
    pub cond: ConditionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Number of discrete path timesteps; t is drawn from the grid
    /// {0, 1/T, ..., (T-1)/T}.
    pub t_steps: usize,
    /// Draw t continuously from [0, 1) instead of the grid.
    pub continuous_time: bool,
    /// L2 clip applied to the log-variance head's gradient.
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            steps: 20_000,
            batch_size: 128,
            t_steps: 1000,
            continuous_time: false,
            clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(DfmError::InputDomain(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.t_steps < 2 {
            return Err(DfmError::InputDomain(format!("t_steps must be >= 2, got {}", self.t_steps)));
        }
        if !(self.clip > 0.0) {
            return Err(DfmError::InputDomain(format!("clip must be > 0, got {}", self.clip)));
        }
        if self.batch_size == 0 {
            return Err(DfmError::InputDomain("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(DfmError::InputDomain("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Linear transport path between noise and data: the state at time t and the
/// (constant) target velocity.
pub fn sample_path_point(x0: &[f64], x1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x0.len() != x1.len() {
        return Err(DfmError::InputDomain(format!(
            "path endpoints disagree on dimension: {} vs {}",
            x0.len(),
            x1.len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(DfmError::InputDomain(format!("t = {t} outside [0, 1]")));
    }
    let x_t = (0..x0.len()).map(|i| (1.0 - t) * x0[i] + t * x1[i]).collect();
    let v_target = linalg::sub(x1, x0);
    Ok((x_t, v_target))
}

#[derive(Debug, Clone)]
pub struct NllResult {
    pub loss: f64,
    pub grad_mu: Vec<f64>,
    pub grad_log_var: f64,
    /// Variance hit the clamp bounds; its gradient was zeroed.
    pub clamped: bool,
    pub sigma2: f64,
}

/// Gaussian velocity NLL and its gradients.
pub fn nll_loss(dist: &VelocityDistribution, v_target: &[f64]) -> Result<NllResult> {
    let d = dist.mu.len();
    if v_target.len() != d {
        return Err(DfmError::InputDomain(format!(
            "target velocity has length {}, prediction has {d}",
            v_target.len()
        )));
    }
    if !linalg::all_finite(&dist.mu) || !dist.log_var.is_finite() || !linalg::all_finite(v_target) {
        return Err(DfmError::NumericDomain("non-finite inputs to nll_loss".into()));
    }
    let clamped = dist.log_var < LOG_VAR_MIN || dist.log_var > LOG_VAR_MAX;
    let lv = dist.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
    let sigma2 = lv.exp();
    let r = linalg::sq_norm(&linalg::sub(v_target, &dist.mu));
    let loss = 0.5 * d as f64 * lv + r / (2.0 * sigma2);
    let grad_mu = (0..d).map(|i| (dist.mu[i] - v_target[i]) / sigma2).collect();
    let grad_log_var = if clamped { 0.0 } else { 0.5 * d as f64 - r / (2.0 * sigma2) };
    Ok(NllResult { loss, grad_mu, grad_log_var, clamped, sigma2 })
}

/// The variance minimizing the NLL for a fixed mean: residual_sq / d.
pub fn optimal_variance(residual_sq: f64, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(DfmError::InputDomain("optimal_variance needs d >= 1".into()));
    }
    if !(residual_sq >= 0.0) || !residual_sq.is_finite() {
        return Err(DfmError::InputDomain(format!(
            "residual_sq must be finite and >= 0, got {residual_sq}"
        )));
    }
    Ok(residual_sq / d as f64)
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let frac = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Decoupled-weight-decay adaptive moment optimizer state.
pub struct AdamState {
    m: NetParams,
    v: NetParams,
    t: usize,
}

impl AdamState {
    pub fn new(shape: &NetParams) -> Self {
        AdamState { m: shape.zeros_like(), v: shape.zeros_like(), t: 0 }
    }

    pub fn update(&mut self, params: &mut NetParams, grad: &NetParams, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut pt = params.tensors_mut();
        let mut mt = self.m.tensors_mut();
        let mut vt = self.v.tensors_mut();
        let gt = grad.tensors();
        for i in 0..pt.len() {
            let p = &mut pt[i].1;
            let m = &mut mt[i].1;
            let v = &mut vt[i].1;
            let g = gt[i].3;
            for k in 0..p.len() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p[k]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub loss: f64,
    pub mean_sigma2: f64,
    pub clamp_events: usize,
}

/// Mean NLL gradient over a batch (summed in index order, then divided).
pub fn compute_batch_grad(params: &NetParams, batch: &[PathSample]) -> Result<(NetParams, BatchStats)> {
    if batch.is_empty() {
        return Err(DfmError::InputDomain("batch must be nonempty".into()));
    }
    let mut grad = params.zeros_like();
    let mut loss_sum = 0.0;
    let mut sigma2_sum = 0.0;
    let mut clamp_events = 0;
    for sample in batch {
        let (dist, cache) = params.forward_cached(&sample.x_t, sample.t, sample.cond)?;
        let nll = nll_loss(&dist, &sample.v_target)?;
        loss_sum += nll.loss;
        sigma2_sum += nll.sigma2;
        clamp_events += nll.clamped as usize;
        let g = params.backward(&cache, &nll.grad_mu, nll.grad_log_var);
        grad.add_scaled(&g, 1.0);
    }
    let inv_b = 1.0 / batch.len() as f64;
    for (_, t) in grad.tensors_mut() {
        for v in t {
            *v *= inv_b;
        }
    }
    Ok((
        grad,
        BatchStats {
            loss: loss_sum * inv_b,
            mean_sigma2: sigma2_sum * inv_b,
            clamp_events,
        },
    ))
}

/// Rescale the log-variance head's gradient so its joint L2 norm is at most
/// `clip`. Returns the norm after clipping.
pub fn clip_logvar_head(grad: &mut NetParams, clip: f64) -> f64 {
    let norm = (linalg::sq_norm(&grad.w_lv) + grad.b_lv * grad.b_lv).sqrt();
    if norm > clip {
        let s = clip / norm;
        for v in grad.w_lv.iter_mut() {
            *v *= s;
        }
        grad.b_lv *= s;
        clip
    } else {
        norm
    }
}

fn global_grad_norm(grad: &NetParams) -> f64 {
    grad.tensors().iter().map(|(_, _, _, d)| linalg::sq_norm(d)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub mean_sigma2: f64,
    pub grad_norm: f64,
    pub logvar_grad_norm: f64,
    pub clamp_events: usize,
}

/// One optimizer step on the batch-mean loss. The log-variance head's
/// gradient is L2-clipped before the update; everything else is untouched.
pub fn train_step(
    params: &mut NetParams,
    adam: &mut AdamState,
    batch: &[PathSample],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let (mut grad, stats) = compute_batch_grad(params, batch)?;
    if !stats.loss.is_finite() {
        return Err(DfmError::NumericDomain(format!(
            "non-finite batch loss {} (mean sigma^2 {}, clamp events {})",
            stats.loss, stats.mean_sigma2, stats.clamp_events
        )));
    }
    let logvar_grad_norm = clip_logvar_head(&mut grad, cfg.clip);
    let grad_norm = global_grad_norm(&grad);
    adam.update(params, &grad, lr, cfg.weight_decay);
    Ok(StepStats {
        loss: stats.loss,
        mean_sigma2: stats.mean_sigma2,
        grad_norm,
        logvar_grad_norm,
        clamp_events: stats.clamp_events,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_sigma2: f64,
    pub grad_norm: f64,
    pub logvar_grad_norm: f64,
    pub lr: f64,
    pub clamp_events: usize,
}

/// Draw t for a path point: uniform over the discrete grid
/// {0, 1/T, ..., (T-1)/T}, or continuously from [0,1) behind the flag.
fn draw_t<R: Rng>(r: &mut R, cfg: &TrainConfig) -> f64 {
    if cfg.continuous_time {
        r.gen::<f64>()
    } else {
        r.gen_range(0..cfg.t_steps) as f64 / cfg.t_steps as f64
    }
}

/// Full training loop: deterministic given (dataset, config), emits one log
/// record per step. Per batch slot the stream is consumed in a fixed order:
/// dataset index, then x0, then t.
pub fn train(
    mut params: NetParams,
    dataset: &[NoteSample],
    cfg: &TrainConfig,
) -> Result<(NetParams, Vec<TrainLogRecord>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(DfmError::InputDomain("training dataset is empty".into()));
    }
    let d = params.sizes.d;
    for (i, s) in dataset.iter().enumerate() {
        if s.x.len() != d {
            return Err(DfmError::InputDomain(format!(
                "dataset sample {i} has dimension {}, network expects {d}",
                s.x.len()
            )));
        }
    }
    let mut adam = AdamState::new(&params);
    let mut r = rng::derive_rng(cfg.seed, &[tag::TRAIN]);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let sample = &dataset[r.gen_range(0..dataset.len())];
            let x0 = rng::standard_normal_vec(&mut r, d);
            let t = draw_t(&mut r, cfg);
            let (x_t, v_target) = sample_path_point(&x0, &sample.x, t)?;
            batch.push(PathSample { x_t, t, v_target, cond: sample.cond });
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let stats = train_step(&mut params, &mut adam, &batch, lr, cfg)
            .map_err(|e| match e {
                DfmError::NumericDomain(msg) => DfmError::NumericDomain(format!("step {step}: {msg}")),
                other => other,
            })?;
        log.push(TrainLogRecord {
            step,
            loss: stats.loss,
            mean_sigma2: stats.mean_sigma2,
            grad_norm: stats.grad_norm,
            logvar_grad_norm: stats.logvar_grad_norm,
            lr,
            clamp_events: stats.clamp_events,
        });
    }
    Ok((params, log))
}

/// Write one JSON object per line; no timestamps, so reruns are byte-identical.
pub fn write_log(path: &std::path::Path, records: &[TrainLogRecord]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| DfmError::Validation(format!("log record not serializable: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

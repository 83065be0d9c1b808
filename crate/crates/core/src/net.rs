//! Velocity-field network: an MLP with adaptive layer-norm conditioning and
//! two output heads, one for the velocity mean and one for a scalar
//! log-variance.
//!
//! The forward map is
//!
//! ```text
//! cond_vec = class_row + pitch_row + velocity_row + time_embedding(t)
//! h        = W_in x + b_in
//! per block: h <- h + alpha .* MLP(LN(h) .* (1 + gamma) + beta)
//!            with (gamma, beta, alpha) = W_mod cond_vec + b_mod
//! mu       = W_mu h + b_mu
//! log_var  = w_lv . h + b_lv
//! ```
//!
//! Gradients are hand-written reverse mode and are checked against the
//! central-finite-difference oracle in this module's tests (and again in the
//! acceptance suite).

use serde::{Deserialize, Serialize};

use crate::error::{DfmError, Result};
use crate::linalg::{self, Mat};
use crate::rng::{self, tag};

/// Layer-norm epsilon added to the feature variance.
pub const LN_EPS: f64 = 1e-5;

/// The log-variance head is bias-initialized so that `exp(log_var) = 0.1`
/// before any training step.
pub const INIT_VARIANCE: f64 = 0.1;

const TIME_EMB_MAX_PERIOD: f64 = 10_000.0;

/// Declared layer sizes; every tensor shape in [`NetParams`] derives from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSizes {
    /// Data / velocity dimension.
    pub d: usize,
    /// Hidden width H.
    pub hidden: usize,
    /// Number of conditioned residual blocks L.
    pub depth: usize,
    /// Condition table sizes.
    pub classes: usize,
    pub pitches: usize,
    pub velocities: usize,
}

impl LayerSizes {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 {
            return Err(DfmError::InputDomain(format!(
                "layer sizes need d >= 1 and hidden >= 1, got d={} hidden={}",
                self.d, self.hidden
            )));
        }
        if self.classes == 0 || self.pitches == 0 || self.velocities == 0 {
            return Err(DfmError::InputDomain(
                "condition table sizes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Discrete conditioning triple: (instrument class, pitch, velocity level).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub class_id: usize,
    pub pitch_id: usize,
    pub velocity_id: usize,
}

impl ConditionSet {
    pub fn new(class_id: usize, pitch_id: usize, velocity_id: usize) -> Self {
        ConditionSet { class_id, pitch_id, velocity_id }
    }
}

/// Predicted Gaussian over velocities: mean vector plus a scalar log-variance
/// (isotropic covariance `exp(log_var) * I`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityDistribution {
    pub mu: Vec<f64>,
    pub log_var: f64,
}

impl VelocityDistribution {
    pub fn sigma(&self) -> f64 {
        (0.5 * self.log_var).exp()
    }
}

/// One conditioned residual block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    /// (3H x H) projection of the conditioning vector onto (gamma, beta, alpha).
    pub w_mod: Mat,
    pub b_mod: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// All parameters of the velocity network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub sizes: LayerSizes,
    /// (C x H), (P x H), (V x H) condition lookup tables.
    pub class_table: Mat,
    pub pitch_table: Mat,
    pub vel_table: Mat,
    /// (H x d) input projection.
    pub w_in: Mat,
    pub b_in: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    /// (d x H) mean head.
    pub w_mu: Mat,
    pub b_mu: Vec<f64>,
    /// (H) log-variance head; zero-initialized weights, bias ln(0.1).
    pub w_lv: Vec<f64>,
    pub b_lv: f64,
    /// Seed the tensors were initialized from; carried into checkpoints.
    pub init_seed: u64,
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of a scalar time into `h` features: pairs of
/// `sin(t * w_i), cos(t * w_i)` with geometrically spaced frequencies.
pub fn time_embedding(t: f64, h: usize) -> Vec<f64> {
    let mut emb = vec![0.0; h];
    let half = h / 2;
    for i in 0..half {
        let omega = TIME_EMB_MAX_PERIOD.powf(-(i as f64) / half as f64);
        emb[2 * i] = (t * omega).sin();
        emb[2 * i + 1] = (t * omega).cos();
    }
    emb
}

fn ln_forward(x: &[f64]) -> (Vec<f64>, f64, f64) {
    let h = x.len() as f64;
    let mean = x.iter().sum::<f64>() / h;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let n = x.iter().map(|v| (v - mean) * inv_std).collect();
    (n, mean, inv_std)
}

struct BlockCache {
    x_in: Vec<f64>,
    n: Vec<f64>,
    inv_std: f64,
    gamma: Vec<f64>,
    alpha: Vec<f64>,
    mvec: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
    p: Vec<f64>,
}

/// Intermediate activations needed by [`NetParams::backward`].
pub struct ForwardCache {
    x: Vec<f64>,
    cond: ConditionSet,
    cond_vec: Vec<f64>,
    blocks: Vec<BlockCache>,
    h_final: Vec<f64>,
}

impl BlockParams {
    fn zeros(hidden: usize) -> Self {
        BlockParams {
            w_mod: Mat::zeros(3 * hidden, hidden),
            b_mod: vec![0.0; 3 * hidden],
            w1: Mat::zeros(hidden, hidden),
            b1: vec![0.0; hidden],
            w2: Mat::zeros(hidden, hidden),
            b2: vec![0.0; hidden],
        }
    }

    fn forward(&self, x: &[f64], cond_vec: &[f64]) -> BlockCache {
        let h = x.len();
        let (n, _mean, inv_std) = ln_forward(x);
        let modv = {
            let mut m = self.w_mod.matvec(cond_vec);
            for (a, b) in m.iter_mut().zip(&self.b_mod) {
                *a += b;
            }
            m
        };
        let gamma = modv[0..h].to_vec();
        let beta = modv[h..2 * h].to_vec();
        let alpha = modv[2 * h..3 * h].to_vec();
        let mvec: Vec<f64> = (0..h).map(|i| n[i] * (1.0 + gamma[i]) + beta[i]).collect();
        let mut u = self.w1.matvec(&mvec);
        for (a, b) in u.iter_mut().zip(&self.b1) {
            *a += b;
        }
        let a: Vec<f64> = u.iter().map(|&v| silu(v)).collect();
        let mut p = self.w2.matvec(&a);
        for (x, b) in p.iter_mut().zip(&self.b2) {
            *x += b;
        }
        BlockCache { x_in: x.to_vec(), n, inv_std, gamma, alpha, mvec, u, a, p }
    }

    /// The block map `x + alpha .* MLP(LN(x) .* (1 + gamma) + beta)` with the
    /// modulation triple projected from `cond_vec`.
    pub fn apply(&self, x: &[f64], cond_vec: &[f64]) -> Result<Vec<f64>> {
        let h = self.w1.rows;
        if x.len() != h || cond_vec.len() != self.w_mod.cols {
            return Err(DfmError::InputDomain(format!(
                "block expects x of len {} and cond_vec of len {}, got {} and {}",
                h,
                self.w_mod.cols,
                x.len(),
                cond_vec.len()
            )));
        }
        let cache = self.forward(x, cond_vec);
        Ok((0..h).map(|i| x[i] + cache.alpha[i] * cache.p[i]).collect())
    }
}

impl NetParams {
    /// Fresh parameters: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// biases zero, log-variance head zeroed with bias `ln(0.1)`.
    pub fn init(sizes: LayerSizes, seed: u64) -> Result<Self> {
        sizes.validate()?;
        let mut params = Self::zeros(sizes, seed);
        let mut r = rng::derive_rng(seed, &[tag::INIT]);
        let mut fill = |m: &mut Mat, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in m.data.iter_mut() {
                *v = (2.0 * rand::Rng::gen::<f64>(&mut r) - 1.0) * bound;
            }
        };
        let h = sizes.hidden;
        fill(&mut params.class_table, h);
        fill(&mut params.pitch_table, h);
        fill(&mut params.vel_table, h);
        fill(&mut params.w_in, sizes.d);
        for b in params.blocks.iter_mut() {
            fill(&mut b.w_mod, h);
            fill(&mut b.w1, h);
            fill(&mut b.w2, h);
        }
        fill(&mut params.w_mu, h);
        // w_lv stays zero so the head's output is the bias for any input.
        params.b_lv = INIT_VARIANCE.ln();
        Ok(params)
    }

    /// All-zero tensors of the right shapes; also the shape of a gradient.
    pub fn zeros(sizes: LayerSizes, seed: u64) -> Self {
        let h = sizes.hidden;
        NetParams {
            sizes,
            class_table: Mat::zeros(sizes.classes, h),
            pitch_table: Mat::zeros(sizes.pitches, h),
            vel_table: Mat::zeros(sizes.velocities, h),
            w_in: Mat::zeros(h, sizes.d),
            b_in: vec![0.0; h],
            blocks: (0..sizes.depth).map(|_| BlockParams::zeros(h)).collect(),
            w_mu: Mat::zeros(sizes.d, h),
            b_mu: vec![0.0; sizes.d],
            w_lv: vec![0.0; h],
            b_lv: 0.0,
            init_seed: seed,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.sizes, self.init_seed)
    }

    /// Sum of the three condition table rows. Time is handled separately by
    /// [`NetParams::forward`].
    pub fn embed_condition(&self, cond: ConditionSet) -> Result<Vec<f64>> {
        self.check_cond(cond)?;
        let mut v = self.class_table.row(cond.class_id).to_vec();
        linalg::axpy(&mut v, 1.0, self.pitch_table.row(cond.pitch_id));
        linalg::axpy(&mut v, 1.0, self.vel_table.row(cond.velocity_id));
        Ok(v)
    }

    fn check_cond(&self, cond: ConditionSet) -> Result<()> {
        let s = &self.sizes;
        if cond.class_id >= s.classes || cond.pitch_id >= s.pitches || cond.velocity_id >= s.velocities
        {
            return Err(DfmError::InputDomain(format!(
                "condition ({}, {}, {}) out of bounds for tables ({}, {}, {})",
                cond.class_id, cond.pitch_id, cond.velocity_id, s.classes, s.pitches, s.velocities
            )));
        }
        Ok(())
    }

    fn check_forward_input(&self, x: &[f64], t: f64, cond: ConditionSet) -> Result<()> {
        self.check_cond(cond)?;
        if x.len() != self.sizes.d {
            return Err(DfmError::InputDomain(format!(
                "state has length {}, network expects d = {}",
                x.len(),
                self.sizes.d
            )));
        }
        if !linalg::all_finite(x) || !t.is_finite() {
            return Err(DfmError::NumericDomain("non-finite network input".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(DfmError::InputDomain(format!("t = {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Predict the velocity distribution at `(x, t)` under condition `cond`.
    pub fn forward(&self, x: &[f64], t: f64, cond: ConditionSet) -> Result<VelocityDistribution> {
        Ok(self.forward_cached(x, t, cond)?.0)
    }

    /// Forward pass that also returns the activations the backward pass needs.
    pub fn forward_cached(
        &self,
        x: &[f64],
        t: f64,
        cond: ConditionSet,
    ) -> Result<(VelocityDistribution, ForwardCache)> {
        self.check_forward_input(x, t, cond)?;
        let mut cond_vec = self.embed_condition(cond)?;
        linalg::axpy(&mut cond_vec, 1.0, &time_embedding(t, self.sizes.hidden));

        let mut h = self.w_in.matvec(x);
        for (a, b) in h.iter_mut().zip(&self.b_in) {
            *a += b;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let cache = block.forward(&h, &cond_vec);
            for i in 0..h.len() {
                h[i] = cache.x_in[i] + cache.alpha[i] * cache.p[i];
            }
            blocks.push(cache);
        }
        let mut mu = self.w_mu.matvec(&h);
        for (a, b) in mu.iter_mut().zip(&self.b_mu) {
            *a += b;
        }
        let log_var = linalg::dot(&self.w_lv, &h) + self.b_lv;
        let dist = VelocityDistribution { mu, log_var };
        let cache = ForwardCache { x: x.to_vec(), cond, cond_vec, blocks, h_final: h };
        Ok((dist, cache))
    }

    /// Exact reverse-mode gradients of the forward map, seeded with upstream
    /// gradients on `mu` and `log_var`. Returns a parameter-shaped gradient.
    pub fn backward(&self, cache: &ForwardCache, d_mu: &[f64], d_log_var: f64) -> NetParams {
        let h = self.sizes.hidden;
        let mut g = self.zeros_like();

        // Heads.
        g.w_mu.add_outer(d_mu, &cache.h_final);
        linalg::axpy(&mut g.b_mu, 1.0, d_mu);
        linalg::axpy(&mut g.w_lv, d_log_var, &cache.h_final);
        g.b_lv = d_log_var;

        let mut d_h = self.w_mu.matvec_t(d_mu);
        linalg::axpy(&mut d_h, d_log_var, &self.w_lv);

        let mut d_cond = vec![0.0; h];
        for bi in (0..self.blocks.len()).rev() {
            let block = &self.blocks[bi];
            let bc = &cache.blocks[bi];
            let gb = &mut g.blocks[bi];
            // out = x_in + alpha .* p
            let d_alpha: Vec<f64> = (0..h).map(|i| d_h[i] * bc.p[i]).collect();
            let d_p: Vec<f64> = (0..h).map(|i| d_h[i] * bc.alpha[i]).collect();

            let mut d_a = block.w2.matvec_t(&d_p);
            gb.w2.add_outer(&d_p, &bc.a);
            linalg::axpy(&mut gb.b2, 1.0, &d_p);

            for (da, u) in d_a.iter_mut().zip(&bc.u) {
                *da *= silu_deriv(*u);
            }
            let d_u = d_a;
            let d_m = block.w1.matvec_t(&d_u);
            gb.w1.add_outer(&d_u, &bc.mvec);
            linalg::axpy(&mut gb.b1, 1.0, &d_u);

            let d_gamma: Vec<f64> = (0..h).map(|i| d_m[i] * bc.n[i]).collect();
            let d_beta = d_m.clone();
            let d_n: Vec<f64> = (0..h).map(|i| d_m[i] * (1.0 + bc.gamma[i])).collect();

            // Modulation projection: one (3H) upstream vector.
            let mut d_mod = Vec::with_capacity(3 * h);
            d_mod.extend_from_slice(&d_gamma);
            d_mod.extend_from_slice(&d_beta);
            d_mod.extend_from_slice(&d_alpha);
            gb.w_mod.add_outer(&d_mod, &cache.cond_vec);
            linalg::axpy(&mut gb.b_mod, 1.0, &d_mod);
            linalg::axpy(&mut d_cond, 1.0, &block.w_mod.matvec_t(&d_mod));

            // Layer norm backward: dx = inv_std * (dn - mean(dn) - n * mean(dn .* n)).
            let hf = h as f64;
            let mean_dn = d_n.iter().sum::<f64>() / hf;
            let mean_dn_n = d_n.iter().zip(&bc.n).map(|(a, b)| a * b).sum::<f64>() / hf;
            for i in 0..h {
                // residual path plus the normalized path
                d_h[i] += bc.inv_std * (d_n[i] - mean_dn - bc.n[i] * mean_dn_n);
            }
        }

        // Input projection.
        g.w_in.add_outer(&d_h, &cache.x);
        linalg::axpy(&mut g.b_in, 1.0, &d_h);

        // Condition tables: the summed cond_vec routes the same gradient into
        // the one used row of each table (time embedding has no parameters).
        for (dst, src) in g
            .class_table
            .data
            .iter_mut()
            .skip(cache.cond.class_id * h)
            .take(h)
            .zip(&d_cond)
        {
            *dst += src;
        }
        for (dst, src) in g
            .pitch_table
            .data
            .iter_mut()
            .skip(cache.cond.pitch_id * h)
            .take(h)
            .zip(&d_cond)
        {
            *dst += src;
        }
        for (dst, src) in g
            .vel_table
            .data
            .iter_mut()
            .skip(cache.cond.velocity_id * h)
            .take(h)
            .zip(&d_cond)
        {
            *dst += src;
        }
        g
    }

    /// Named views of every tensor, in a fixed order shared by the optimizer,
    /// the checkpoint format, and the finite-difference oracle.
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut out: Vec<(String, usize, usize, &[f64])> = vec![
            ("class_table".into(), self.class_table.rows, self.class_table.cols, &self.class_table.data[..]),
            ("pitch_table".into(), self.pitch_table.rows, self.pitch_table.cols, &self.pitch_table.data[..]),
            ("vel_table".into(), self.vel_table.rows, self.vel_table.cols, &self.vel_table.data[..]),
            ("w_in".into(), self.w_in.rows, self.w_in.cols, &self.w_in.data[..]),
            ("b_in".into(), self.b_in.len(), 1, &self.b_in[..]),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.w_mod"), b.w_mod.rows, b.w_mod.cols, &b.w_mod.data[..]));
            out.push((format!("block{i}.b_mod"), b.b_mod.len(), 1, &b.b_mod[..]));
            out.push((format!("block{i}.w1"), b.w1.rows, b.w1.cols, &b.w1.data[..]));
            out.push((format!("block{i}.b1"), b.b1.len(), 1, &b.b1[..]));
            out.push((format!("block{i}.w2"), b.w2.rows, b.w2.cols, &b.w2.data[..]));
            out.push((format!("block{i}.b2"), b.b2.len(), 1, &b.b2[..]));
        }
        out.push(("w_mu".into(), self.w_mu.rows, self.w_mu.cols, &self.w_mu.data[..]));
        out.push(("b_mu".into(), self.b_mu.len(), 1, &self.b_mu[..]));
        out.push(("w_lv".into(), self.w_lv.len(), 1, &self.w_lv[..]));
        out.push(("b_lv".into(), 1, 1, std::slice::from_ref(&self.b_lv)));
        out
    }

    /// Mutable tensor views in the same order as [`NetParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let NetParams {
            class_table, pitch_table, vel_table, w_in, b_in, blocks, w_mu, b_mu, w_lv, b_lv, ..
        } = self;
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("class_table".into(), &mut class_table.data[..]),
            ("pitch_table".into(), &mut pitch_table.data[..]),
            ("vel_table".into(), &mut vel_table.data[..]),
            ("w_in".into(), &mut w_in.data[..]),
            ("b_in".into(), &mut b_in[..]),
        ];
        for (i, b) in blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.w_mod"), &mut b.w_mod.data[..]));
            out.push((format!("block{i}.b_mod"), &mut b.b_mod[..]));
            out.push((format!("block{i}.w1"), &mut b.w1.data[..]));
            out.push((format!("block{i}.b1"), &mut b.b1[..]));
            out.push((format!("block{i}.w2"), &mut b.w2.data[..]));
            out.push((format!("block{i}.b2"), &mut b.b2[..]));
        }
        out.push(("w_mu".into(), &mut w_mu.data[..]));
        out.push(("b_mu".into(), &mut b_mu[..]));
        out.push(("w_lv".into(), &mut w_lv[..]));
        out.push(("b_lv".into(), std::slice::from_mut(b_lv)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, _, d)| d.len()).sum()
    }

    /// self += s * other, tensor by tensor.
    pub fn add_scaled(&mut self, other: &NetParams, s: f64) {
        let mut dst = self.tensors_mut();
        let src = other.tensors();
        assert_eq!(dst.len(), src.len(), "parameter layout mismatch");
        for ((_, d), (_, _, _, o)) in dst.iter_mut().zip(src.iter()) {
            linalg::axpy(d, s, o);
        }
    }
}

/// Central finite differences of a scalar loss over every parameter.
///
/// The oracle only ever calls `loss_fn`; it never touches the analytic
/// backward pass, which is exactly what makes it a useful cross-check.
pub fn finite_diff_grad<F>(params: &NetParams, loss_fn: F, step: f64) -> Result<NetParams>
where
    F: Fn(&NetParams) -> f64,
{
    if step <= 0.0 {
        return Err(DfmError::InputDomain(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut scratch = params.clone();
    let mut grad = params.zeros_like();
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].3.len();
        for k in 0..len {
            let orig = params.tensors()[ti].3[k];
            scratch.tensors_mut()[ti].1[k] = orig + step;
            let up = loss_fn(&scratch);
            scratch.tensors_mut()[ti].1[k] = orig - step;
            let down = loss_fn(&scratch);
            scratch.tensors_mut()[ti].1[k] = orig;
            grad.tensors_mut()[ti].1[k] = (up - down) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// Max relative error between two parameter-shaped gradients, with a floor on
/// the denominator so near-zero pairs compare absolutely. The floor sits well
/// above the ~1e-10 absolute noise of central differences at step 1e-5, so a
/// reported error reflects the analytic gradient rather than oracle roundoff.
pub const GRAD_CHECK_DENOM_FLOOR: f64 = 1e-5;

pub fn max_rel_error(a: &NetParams, b: &NetParams) -> (f64, Vec<(String, f64)>) {
    let ta = a.tensors();
    let tb = b.tensors();
    let mut worst = 0.0f64;
    let mut per_group = Vec::with_capacity(ta.len());
    for ((name, _, _, da), (_, _, _, db)) in ta.iter().zip(tb.iter()) {
        let mut group_worst = 0.0f64;
        for (x, y) in da.iter().zip(db.iter()) {
            let denom = x.abs().max(y.abs()).max(GRAD_CHECK_DENOM_FLOOR);
            group_worst = group_worst.max((x - y).abs() / denom);
        }
        per_group.push((name.clone(), group_worst));
        worst = worst.max(group_worst);
    }
    (worst, per_group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_sizes(d: usize) -> LayerSizes {
        LayerSizes { d, hidden: 8, depth: 2, classes: 2, pitches: 3, velocities: 2 }
    }

    fn random_input<R: Rng>(rng: &mut R, sizes: LayerSizes) -> (Vec<f64>, f64, ConditionSet) {
        let x = rng::standard_normal_vec(rng, sizes.d);
        let t: f64 = rng.gen::<f64>();
        let cond = ConditionSet::new(
            rng.gen_range(0..sizes.classes),
            rng.gen_range(0..sizes.pitches),
            rng.gen_range(0..sizes.velocities),
        );
        (x, t, cond)
    }

    #[test]
    fn init_logvar_is_exactly_log_point_one() {
        let params = NetParams::init(small_sizes(2), 3).unwrap();
        let mut rng = rng::derive_rng(99, &[1]);
        for _ in 0..100 {
            let (x, t, cond) = random_input(&mut rng, params.sizes);
            let dist = params.forward(&x, t, cond).unwrap();
            assert_eq!(dist.log_var, 0.1f64.ln());
            assert!((dist.log_var.exp() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = NetParams::init(small_sizes(2), 11).unwrap();
        let b = NetParams::init(small_sizes(2), 11).unwrap();
        assert_eq!(a, b);
        let c = NetParams::init(small_sizes(2), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn embed_condition_zero_tables() {
        let params = NetParams::zeros(small_sizes(2), 0);
        let v = params.embed_condition(ConditionSet::new(1, 2, 0)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embed_condition_unit_basis_rows() {
        let mut params = NetParams::zeros(small_sizes(2), 0);
        *params.class_table.at_mut(0, 0) = 1.0;
        *params.pitch_table.at_mut(0, 1) = 1.0;
        *params.vel_table.at_mut(0, 2) = 1.0;
        let v = params.embed_condition(ConditionSet::new(0, 0, 0)).unwrap();
        let mut expect = vec![0.0; 8];
        expect[0] = 1.0;
        expect[1] = 1.0;
        expect[2] = 1.0;
        assert_eq!(v, expect);
    }

    #[test]
    fn embed_condition_deterministic_and_bounds_checked() {
        let params = NetParams::init(small_sizes(2), 5).unwrap();
        let cond = ConditionSet::new(1, 1, 1);
        assert_eq!(params.embed_condition(cond).unwrap(), params.embed_condition(cond).unwrap());
        assert!(matches!(
            params.embed_condition(ConditionSet::new(2, 0, 0)),
            Err(DfmError::InputDomain(_))
        ));
    }

    #[test]
    fn adaln_alpha_zero_is_identity() {
        // w_mod = 0, b_mod = 0 makes gamma = beta = alpha = 0.
        let block = BlockParams::zeros(8);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let cond = vec![0.7; 8];
        assert_eq!(block.apply(&x, &cond).unwrap(), x);
    }

    #[test]
    fn adaln_gamma_beta_zero_alpha_one() {
        let mut rng = rng::derive_rng(17, &[2]);
        let h = 8;
        let mut block = BlockParams::zeros(h);
        for i in 0..h {
            block.b_mod[2 * h + i] = 1.0; // alpha = 1
        }
        for v in block.w1.data.iter_mut().chain(block.w2.data.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x: Vec<f64> = rng::standard_normal_vec(&mut rng, h);
        let got = block.apply(&x, &vec![0.3; h]).unwrap();

        // Independent re-evaluation of x + MLP(LN(x)).
        let (n, _, _) = ln_forward(&x);
        let u = block.w1.matvec(&n);
        let a: Vec<f64> = u.iter().map(|&v| silu(v)).collect();
        let p = block.w2.matvec(&a);
        for i in 0..h {
            assert!((got[i] - (x[i] + p[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn adaln_finite_outputs_for_random_params() {
        let h = 8;
        for seed in 0..1000u64 {
            let mut rng = rng::derive_rng(seed, &[3]);
            let mut block = BlockParams::zeros(h);
            for v in block
                .w_mod
                .data
                .iter_mut()
                .chain(block.b_mod.iter_mut())
                .chain(block.w1.data.iter_mut())
                .chain(block.b1.iter_mut())
                .chain(block.w2.data.iter_mut())
                .chain(block.b2.iter_mut())
            {
                *v = rng.gen_range(-1.0..1.0);
            }
            let x: Vec<f64> = (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cond: Vec<f64> = (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = block.apply(&x, &cond).unwrap();
            assert!(linalg::all_finite(&y), "seed {seed}");
        }
    }

    #[test]
    fn adaln_dimension_mismatch_is_rejected() {
        let block = BlockParams::zeros(8);
        assert!(matches!(block.apply(&[0.0; 7], &[0.0; 8]), Err(DfmError::InputDomain(_))));
        assert!(matches!(block.apply(&[0.0; 8], &[0.0; 9]), Err(DfmError::InputDomain(_))));
    }

    /// d=2, H=2, L=1 network with hand-set weights; expected values computed
    /// independently with 50-digit arithmetic from the layer formulas.
    #[test]
    fn forward_matches_hand_evaluated_fixture() {
        let sizes = LayerSizes { d: 2, hidden: 2, depth: 1, classes: 1, pitches: 1, velocities: 1 };
        let mut p = NetParams::zeros(sizes, 0);
        p.class_table = Mat::from_rows(&[vec![0.1, -0.2]]);
        p.pitch_table = Mat::from_rows(&[vec![0.05, 0.0]]);
        p.vel_table = Mat::from_rows(&[vec![0.0, 0.3]]);
        p.w_in = Mat::from_rows(&[vec![0.5, -0.3], vec![0.2, 0.7]]);
        p.b_in = vec![0.01, -0.02];
        p.blocks[0].w_mod = Mat::from_rows(&[
            vec![0.1, -0.1],
            vec![0.2, 0.0],
            vec![-0.3, 0.2],
            vec![0.0, 0.1],
            vec![0.4, -0.2],
            vec![-0.1, 0.3],
        ]);
        p.blocks[0].b_mod = vec![0.01, -0.01, 0.02, 0.0, -0.02, 0.03];
        p.blocks[0].w1 = Mat::from_rows(&[vec![0.6, -0.4], vec![0.3, 0.5]]);
        p.blocks[0].b1 = vec![0.05, -0.05];
        p.blocks[0].w2 = Mat::from_rows(&[vec![-0.2, 0.7], vec![0.8, 0.1]]);
        p.blocks[0].b2 = vec![0.0, 0.02];
        p.w_mu = Mat::from_rows(&[vec![1.1, -0.5], vec![0.3, 0.9]]);
        p.b_mu = vec![0.01, 0.02];
        p.w_lv = vec![0.3, -0.4];
        p.b_lv = 0.1f64.ln() + 0.2;

        let dist = p.forward(&[0.4, -0.6], 0.25, ConditionSet::new(0, 0, 0)).unwrap();
        assert!((dist.mu[0] - 0.53696655064994490608).abs() < 1e-12, "mu0 = {}", dist.mu[0]);
        assert!((dist.mu[1] - -0.00075668934386443592846).abs() < 1e-12, "mu1 = {}", dist.mu[1]);
        assert!((dist.log_var - -1.917026852061414807).abs() < 1e-12, "lv = {}", dist.log_var);
    }

    #[test]
    fn forward_is_deterministic() {
        let params = NetParams::init(small_sizes(2), 8).unwrap();
        let cond = ConditionSet::new(0, 2, 1);
        let a = params.forward(&[0.3, -0.7], 0.4, cond).unwrap();
        let b = params.forward(&[0.3, -0.7], 0.4, cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_non_finite_input() {
        let params = NetParams::init(small_sizes(2), 8).unwrap();
        let cond = ConditionSet::new(0, 0, 0);
        assert!(matches!(
            params.forward(&[f64::NAN, 0.0], 0.5, cond),
            Err(DfmError::NumericDomain(_))
        ));
        assert!(matches!(
            params.forward(&[0.0, 0.0], f64::INFINITY, cond),
            Err(DfmError::NumericDomain(_))
        ));
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let params = NetParams::init(small_sizes(2), 21).unwrap();
        let (_, cache) = params
            .forward_cached(&[0.5, -0.5], 0.3, ConditionSet::new(1, 0, 1))
            .unwrap();
        let g = params.backward(&cache, &[0.0, 0.0], 0.0);
        for (_, _, _, data) in g.tensors() {
            assert!(data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn logvar_bias_gradient_is_exactly_one() {
        let params = NetParams::init(small_sizes(2), 22).unwrap();
        let (_, cache) = params
            .forward_cached(&[0.5, -0.5], 0.3, ConditionSet::new(0, 1, 0))
            .unwrap();
        let g = params.backward(&cache, &[0.0, 0.0], 1.0);
        assert_eq!(g.b_lv, 1.0);
    }

    /// The module's core correctness claim: analytic gradients match central
    /// finite differences for random small networks across data dimensions.
    #[test]
    fn backward_matches_finite_differences() {
        for &d in &[1usize, 2, 8] {
            for seed in 0..7u64 {
                let sizes = small_sizes(d);
                let params = NetParams::init(sizes, 1000 + seed).unwrap();
                let mut rng = rng::derive_rng(seed, &[tag::GRADCHECK, d as u64]);
                let (x, t, cond) = random_input(&mut rng, sizes);
                let target = rng::standard_normal_vec(&mut rng, d);
                let lv_target: f64 = rng::standard_normal(&mut rng);

                // Scalar loss: 0.5 ||mu - v||^2 + 0.5 (log_var - w)^2.
                let loss = |p: &NetParams| {
                    let dist = p.forward(&x, t, cond).unwrap();
                    0.5 * linalg::sq_norm(&linalg::sub(&dist.mu, &target))
                        + 0.5 * (dist.log_var - lv_target) * (dist.log_var - lv_target)
                };
                let (dist, cache) = params.forward_cached(&x, t, cond).unwrap();
                let d_mu = linalg::sub(&dist.mu, &target);
                let analytic = params.backward(&cache, &d_mu, dist.log_var - lv_target);
                let numeric = finite_diff_grad(&params, loss, 1e-5).unwrap();
                let (worst, _) = max_rel_error(&analytic, &numeric);
                assert!(worst < 1e-4, "d={d} seed={seed}: max rel err {worst}");
            }
        }
    }

    #[test]
    fn finite_diff_recovers_quadratic_gradient() {
        let params = NetParams::init(small_sizes(1), 77).unwrap();
        let loss = |p: &NetParams| {
            p.tensors().iter().map(|(_, _, _, d)| 0.5 * linalg::sq_norm(d)).sum::<f64>()
        };
        let g = finite_diff_grad(&params, loss, 1e-5).unwrap();
        for ((_, _, _, gd), (_, _, _, pd)) in g.tensors().iter().zip(params.tensors().iter()) {
            for (a, b) in gd.iter().zip(pd.iter()) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn finite_diff_constant_loss_is_zero() {
        let params = NetParams::init(small_sizes(1), 78).unwrap();
        let g = finite_diff_grad(&params, |_| 4.2, 1e-5).unwrap();
        for (_, _, _, d) in g.tensors() {
            assert!(d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let params = NetParams::init(small_sizes(1), 79).unwrap();
        assert!(matches!(finite_diff_grad(&params, |_| 0.0, 0.0), Err(DfmError::InputDomain(_))));
        assert!(matches!(finite_diff_grad(&params, |_| 0.0, -1e-5), Err(DfmError::InputDomain(_))));
    }

    /// Forcing alpha = 0 in every block makes the trunk an identity map, so
    /// mu depends only on the heads applied to the input projection.
    #[test]
    fn alpha_zero_makes_forward_condition_independent() {
        let sizes = small_sizes(2);
        let mut params = NetParams::init(sizes, 30).unwrap();
        for b in params.blocks.iter_mut() {
            // Zero the whole modulation projection: alpha (and gamma, beta) = 0.
            for v in b.w_mod.data.iter_mut() {
                *v = 0.0;
            }
            for v in b.b_mod.iter_mut() {
                *v = 0.0;
            }
        }
        let x = [0.4, 0.9];
        let a = params.forward(&x, 0.2, ConditionSet::new(0, 0, 0)).unwrap();
        let b = params.forward(&x, 0.2, ConditionSet::new(1, 2, 1)).unwrap();
        assert_eq!(a, b);

        // And the trunk output equals the input projection exactly.
        let mut h = params.w_in.matvec(&x);
        for (v, bias) in h.iter_mut().zip(&params.b_in) {
            *v += bias;
        }
        let mut mu = params.w_mu.matvec(&h);
        for (v, bias) in mu.iter_mut().zip(&params.b_mu) {
            *v += bias;
        }
        assert_eq!(a.mu, mu);
    }
}

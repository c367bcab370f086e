//! Flow-DPO objective with a temporal variation penalty.
//!
//! Conventions: `x_t = (1 - t) x0 + t eps` and the velocity target is
//! `v = eps - x0`. Squared errors are full-tensor sums. The penalty is
//! `-lambda * mean_d Var_t(x0_hat)` with population variance.
//!
//! The demonstrator uses a linear velocity model `v = W x + b t + c` applied
//! to each frame row, which keeps the analytic gradient short enough to
//! audit by hand.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float as _;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// A `frames x dims` latent tensor, row-major by frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentClip {
    frames: usize,
    dims: usize,
    data: Vec<f64>,
}

impl LatentClip {
    pub fn new(frames: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if frames < 2 || dims < 1 {
            return Err(Error::contract(format!("clip needs at least 2 frames and 1 dim, got {frames}x{dims}")));
        }
        if data.len() != frames * dims {
            return Err(Error::contract(format!(
                "clip data has {} values, expected {frames}x{dims}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("clip entry {i}")));
        }
        Ok(Self { frames, dims, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::contract("clip rows differ in length"));
        }
        Self::new(rows.len(), dims, rows.concat())
    }

    pub fn constant(frames: usize, dims: usize, value: f64) -> Result<Self> {
        Self::new(frames, dims, vec![value; frames * dims])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, frame: usize, dim: usize) -> f64 {
        self.data[frame * self.dims + dim]
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.dims..(frame + 1) * self.dims]
    }

    fn check_shape(&self, other: &Self, what: &str) -> Result<()> {
        if (self.frames, self.dims) != (other.frames, other.dims) {
            return Err(Error::contract(format!(
                "{what}: shapes {}x{} and {}x{} differ",
                self.frames, self.dims, other.frames, other.dims
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            frames: self.frames,
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Population variance over frames, per dim.
    pub fn temporal_variance(&self) -> Vec<f64> {
        let t = self.frames as f64;
        (0..self.dims)
            .map(|d| {
                let mean = (0..self.frames).map(|f| self.get(f, d)).sum::<f64>() / t;
                (0..self.frames).map(|f| (self.get(f, d) - mean).powi(2)).sum::<f64>() / t
            })
            .collect()
    }

    pub fn mean_temporal_variance(&self) -> f64 {
        self.temporal_variance().iter().sum::<f64>() / self.dims as f64
    }

    fn squared_distance(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum()
    }
}

/// One preference pair at a shared time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoBatchItem {
    pub x0_w: LatentClip,
    pub x0_l: LatentClip,
    pub eps_w: LatentClip,
    pub eps_l: LatentClip,
    pub t: f64,
}

impl DpoBatchItem {
    pub fn new(x0_w: LatentClip, x0_l: LatentClip, eps_w: LatentClip, eps_l: LatentClip, t: f64) -> Result<Self> {
        let item = Self { x0_w, x0_l, eps_w, eps_l, t };
        item.validate()?;
        Ok(item)
    }

    fn validate(&self) -> Result<()> {
        self.x0_w.check_shape(&self.x0_l, "winner and loser")?;
        self.x0_w.check_shape(&self.eps_w, "winner noise")?;
        self.x0_w.check_shape(&self.eps_l, "loser noise")?;
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::contract(format!("t must be in [0, 1], got {}", self.t)));
        }
        Ok(())
    }
}

pub trait VelocityModel {
    fn parameters(&self) -> &[f64];
    fn evaluate(&self, x_t: &LatentClip, t: f64) -> Result<LatentClip>;
}

/// `v[f] = W x[f] + b t + c` for every frame row `f`. Parameters are laid
/// out as `W` (row-major, `dims x dims`), then `b`, then `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearVelocityModel {
    dims: usize,
    params: Vec<f64>,
}

impl LinearVelocityModel {
    pub fn param_count(dims: usize) -> usize {
        dims * dims + 2 * dims
    }

    pub fn new(dims: usize, params: Vec<f64>) -> Result<Self> {
        if dims == 0 {
            return Err(Error::contract("model needs at least one dim"));
        }
        if params.len() != Self::param_count(dims) {
            return Err(Error::contract(format!(
                "linear model over {dims} dims takes {} parameters, got {}",
                Self::param_count(dims),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { dims, params })
    }

    pub fn zeros(dims: usize) -> Self {
        Self {
            dims,
            params: vec![0.0; Self::param_count(dims)],
        }
    }

    /// Parameters drawn from `N(0, scale^2)`.
    pub fn random(dims: usize, scale: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let params = (0..Self::param_count(dims))
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { dims, params }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.params[row * self.dims + col]
    }

    pub fn time_bias(&self, d: usize) -> f64 {
        self.params[self.dims * self.dims + d]
    }

    pub fn bias(&self, d: usize) -> f64 {
        self.params[self.dims * self.dims + self.dims + d]
    }

    fn with_params(&self, params: &[f64]) -> Self {
        Self {
            dims: self.dims,
            params: params.to_vec(),
        }
    }
}

impl VelocityModel for LinearVelocityModel {
    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn evaluate(&self, x_t: &LatentClip, t: f64) -> Result<LatentClip> {
        if x_t.dims != self.dims {
            return Err(Error::contract(format!("model expects {} dims, clip has {}", self.dims, x_t.dims)));
        }
        let d = self.dims;
        let mut out = Vec::with_capacity(x_t.data.len());
        for f in 0..x_t.frames {
            let x = x_t.row(f);
            for r in 0..d {
                let wx: f64 = (0..d).map(|k| self.weight(r, k) * x[k]).sum();
                out.push(wx + self.time_bias(r) * t + self.bias(r));
            }
        }
        LatentClip::new(x_t.frames, d, out)
    }
}

/// How the clean sample is recovered from a velocity prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// `x0_hat = x_t - t v`, exact for `x_t = (1 - t) x0 + t eps`, `v = eps - x0`.
    #[default]
    SelfConsistent,
    /// `x0_hat = x_t + (1 - t) v`, exact for `x_t = t x0 + (1 - t) eps`,
    /// `v = x0 - eps`.
    ReversedTime,
}

/// Which branch's predicted clean sample the temporal penalty sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyBranch {
    #[default]
    Winner,
    /// Mean of the winner and loser penalties.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda: f64,
    pub convention: Convention,
    pub branch: PenaltyBranch,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 0.001,
            convention: Convention::SelfConsistent,
            branch: PenaltyBranch::Winner,
        }
    }
}

pub fn beta_schedule(t: f64, beta: f64) -> f64 {
    beta * (1.0 - t * t)
}

pub fn interpolate(x0: &LatentClip, eps: &LatentClip, t: f64) -> Result<LatentClip> {
    x0.check_shape(eps, "interpolate")?;
    Ok(x0.zip_with(eps, |a, e| (1.0 - t) * a + t * e))
}

pub fn target_velocity(x0: &LatentClip, eps: &LatentClip) -> Result<LatentClip> {
    x0.check_shape(eps, "target velocity")?;
    Ok(x0.zip_with(eps, |a, e| e - a))
}

pub fn predict_clean(x_t: &LatentClip, t: f64, v: &LatentClip, convention: Convention) -> Result<LatentClip> {
    x_t.check_shape(v, "predict clean")?;
    Ok(match convention {
        Convention::SelfConsistent => x_t.zip_with(v, |x, v| x - t * v),
        Convention::ReversedTime => x_t.zip_with(v, |x, v| x + (1.0 - t) * v),
    })
}

/// `d x0_hat / d v` for the convention.
fn clean_slope(t: f64, convention: Convention) -> f64 {
    match convention {
        Convention::SelfConsistent => -t,
        Convention::ReversedTime => 1.0 - t,
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Every intermediate of the Flow-DPO loss for one item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoTerms {
    pub err_theta_w: f64,
    pub err_ref_w: f64,
    pub err_theta_l: f64,
    pub err_ref_l: f64,
    pub beta_t: f64,
    /// Argument of the sigmoid; positive when theta prefers the winner more
    /// than the reference does.
    pub inner: f64,
    pub loss: f64,
}

struct Branch {
    x_t: LatentClip,
    target: LatentClip,
    pred: LatentClip,
    pred_ref: LatentClip,
}

fn branch(
    x0: &LatentClip,
    eps: &LatentClip,
    t: f64,
    theta: &dyn VelocityModel,
    reference: &dyn VelocityModel,
) -> Result<Branch> {
    let x_t = interpolate(x0, eps, t)?;
    let target = target_velocity(x0, eps)?;
    let pred = theta.evaluate(&x_t, t)?;
    let pred_ref = reference.evaluate(&x_t, t)?;
    x_t.check_shape(&pred, "model output")?;
    x_t.check_shape(&pred_ref, "reference output")?;
    Ok(Branch {
        x_t,
        target,
        pred,
        pred_ref,
    })
}

fn finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(term.into()))
    }
}

fn terms_of(w: &Branch, l: &Branch, t: f64, beta: f64) -> Result<DpoTerms> {
    let err_theta_w = finite(w.target.squared_distance(&w.pred), "theta winner error")?;
    let err_ref_w = finite(w.target.squared_distance(&w.pred_ref), "reference winner error")?;
    let err_theta_l = finite(l.target.squared_distance(&l.pred), "theta loser error")?;
    let err_ref_l = finite(l.target.squared_distance(&l.pred_ref), "reference loser error")?;
    let beta_t = beta_schedule(t, beta);
    let inner = finite(
        -0.5 * beta_t * ((err_theta_w - err_ref_w) - (err_theta_l - err_ref_l)),
        "inner term",
    )?;
    Ok(DpoTerms {
        err_theta_w,
        err_ref_w,
        err_theta_l,
        err_ref_l,
        beta_t,
        inner,
        loss: softplus(-inner),
    })
}

pub fn dpo_terms(
    item: &DpoBatchItem,
    theta: &dyn VelocityModel,
    reference: &dyn VelocityModel,
    beta: f64,
) -> Result<DpoTerms> {
    item.validate()?;
    if !(beta > 0.0) {
        return Err(Error::contract(format!("beta must be positive, got {beta}")));
    }
    let w = branch(&item.x0_w, &item.eps_w, item.t, theta, reference)?;
    let l = branch(&item.x0_l, &item.eps_l, item.t, theta, reference)?;
    terms_of(&w, &l, item.t, beta)
}

pub fn flow_dpo_loss(
    item: &DpoBatchItem,
    theta: &dyn VelocityModel,
    reference: &dyn VelocityModel,
    beta: f64,
) -> Result<f64> {
    dpo_terms(item, theta, reference, beta).map(|t| t.loss)
}

pub fn temporal_penalty(x0_hat: &LatentClip, lambda: f64) -> Result<f64> {
    if x0_hat.frames < 2 {
        return Err(Error::contract("temporal penalty needs at least 2 frames"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("lambda must be non-negative, got {lambda}")));
    }
    finite(-lambda * x0_hat.mean_temporal_variance(), "temporal penalty")
}

fn branch_weights(branch: PenaltyBranch) -> (f64, f64) {
    match branch {
        PenaltyBranch::Winner => (1.0, 0.0),
        PenaltyBranch::Both => (0.5, 0.5),
    }
}

/// Flow-DPO loss plus the temporal penalty on the predicted clean sample.
pub fn total_loss(
    item: &DpoBatchItem,
    theta: &dyn VelocityModel,
    reference: &dyn VelocityModel,
    cfg: &LossConfig,
) -> Result<f64> {
    item.validate()?;
    let w = branch(&item.x0_w, &item.eps_w, item.t, theta, reference)?;
    let l = branch(&item.x0_l, &item.eps_l, item.t, theta, reference)?;
    if !(cfg.beta > 0.0) {
        return Err(Error::contract(format!("beta must be positive, got {}", cfg.beta)));
    }
    let terms = terms_of(&w, &l, item.t, cfg.beta)?;
    let (ww, wl) = branch_weights(cfg.branch);
    let mut penalty = 0.0;
    for (b, weight) in [(&w, ww), (&l, wl)] {
        if weight > 0.0 {
            let x0_hat = predict_clean(&b.x_t, item.t, &b.pred, cfg.convention)?;
            penalty += weight * temporal_penalty(&x0_hat, cfg.lambda)?;
        }
    }
    finite(terms.loss + penalty, "total loss")
}

/// Mean total loss over a batch, summed in item order.
pub fn batch_loss(
    items: &[DpoBatchItem],
    theta: &dyn VelocityModel,
    reference: &dyn VelocityModel,
    cfg: &LossConfig,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut sum = 0.0;
    for item in items {
        sum += total_loss(item, theta, reference, cfg)?;
    }
    Ok(sum / items.len() as f64)
}

/// Mean batch loss and its analytic gradient for a linear model.
pub fn loss_and_gradient(
    items: &[DpoBatchItem],
    theta: &LinearVelocityModel,
    reference: &dyn VelocityModel,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if !(cfg.beta > 0.0) {
        return Err(Error::contract(format!("beta must be positive, got {}", cfg.beta)));
    }
    let d = theta.dims;
    let n = items.len() as f64;
    let mut grad = vec![0.0; theta.params.len()];
    let mut total = 0.0;
    let (ww, wl) = branch_weights(cfg.branch);
    for item in items {
        item.validate()?;
        let t = item.t;
        let w = branch(&item.x0_w, &item.eps_w, t, theta, reference)?;
        let l = branch(&item.x0_l, &item.eps_l, t, theta, reference)?;
        let terms = terms_of(&w, &l, t, cfg.beta)?;
        // dL/dz for L = softplus(-z).
        let dz = -sigmoid(-terms.inner);
        let mut loss = terms.loss;

        for (b, sign, weight) in [(&w, 1.0, ww), (&l, -1.0, wl)] {
            let frames = b.x_t.frames;
            // Gradient of the item loss with respect to each predicted velocity.
            // dz/dpred = sign * beta_t * (target - pred).
            let mut g: Vec<f64> = b
                .target
                .data
                .iter()
                .zip(&b.pred.data)
                .map(|(v, p)| dz * sign * terms.beta_t * (v - p))
                .collect();
            if weight > 0.0 {
                let x0_hat = predict_clean(&b.x_t, t, &b.pred, cfg.convention)?;
                loss += weight * temporal_penalty(&x0_hat, cfg.lambda)?;
                let slope = clean_slope(t, cfg.convention);
                let scale = -cfg.lambda * weight * 2.0 / (d as f64 * frames as f64);
                for k in 0..d {
                    let mean = (0..frames).map(|f| x0_hat.get(f, k)).sum::<f64>() / frames as f64;
                    for f in 0..frames {
                        g[f * d + k] += scale * (x0_hat.get(f, k) - mean) * slope;
                    }
                }
            }
            for f in 0..frames {
                let x = b.x_t.row(f);
                for r in 0..d {
                    let gr = g[f * d + r];
                    for k in 0..d {
                        grad[r * d + k] += gr * x[k];
                    }
                    grad[d * d + r] += gr * t;
                    grad[d * d + d + r] += gr;
                }
            }
        }
        total += finite(loss, "total loss")?;
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok((total / n, grad))
}

/// Largest relative difference between `gradient` and central differences of
/// `loss` at `params`, with denominator `max(|g|, 1e-8)`.
pub fn grad_check(
    loss: impl Fn(&[f64]) -> Result<f64>,
    gradient: &[f64],
    params: &[f64],
    h: f64,
) -> Result<f64> {
    if gradient.len() != params.len() {
        return Err(Error::contract("gradient and parameter lengths differ"));
    }
    if params.len() > 10_000 {
        return Err(Error::contract(format!("grad_check is limited to 10^4 parameters, got {}", params.len())));
    }
    if !(h > 0.0) {
        return Err(Error::contract("step must be positive"));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = finite(loss(&p)?, "loss at p + h")?;
        p[i] = orig - h;
        let down = finite(loss(&p)?, "loss at p - h")?;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (gradient[i] - numeric).abs() / gradient[i].abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Mean `inner` over items: the implicit reward margin.
pub fn implicit_reward_margin(
    items: &[DpoBatchItem],
    theta: &dyn VelocityModel,
    reference: &dyn VelocityModel,
    beta: f64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut sum = 0.0;
    for item in items {
        sum += dpo_terms(item, theta, reference, beta)?.inner;
    }
    Ok(sum / items.len() as f64)
}

/// Mean temporal variance of the winner-branch predicted clean samples.
pub fn winner_clean_variance(items: &[DpoBatchItem], model: &dyn VelocityModel, convention: Convention) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut sum = 0.0;
    for item in items {
        let x_t = interpolate(&item.x0_w, &item.eps_w, item.t)?;
        let v = model.evaluate(&x_t, item.t)?;
        sum += predict_clean(&x_t, item.t, &v, convention)?.mean_temporal_variance();
    }
    Ok(sum / items.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    /// Standard deviation of a seeded perturbation added to the reference
    /// parameters at initialization; 0 starts exactly at the reference.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-3,
            loss: LossConfig::default(),
            init_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub model: LinearVelocityModel,
    /// Batch loss before each step, followed by the final loss.
    pub trace: Vec<f64>,
}

const DIVERGENCE_LOSS: f64 = 1e6;

/// Full-batch gradient descent on the mean total loss.
pub fn toy_train(items: &[DpoBatchItem], reference: &LinearVelocityModel, cfg: &TrainConfig) -> Result<TrainResult> {
    if items.is_empty() {
        return Err(Error::contract("no training pairs"));
    }
    if reference.params.len() > 1000 {
        return Err(Error::contract(format!(
            "toy model is limited to 1000 parameters, got {}",
            reference.params.len()
        )));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::contract("learning rate must be non-negative"));
    }
    let mut params = reference.params.clone();
    if cfg.init_noise > 0.0 {
        let mut rng = seed::rng(seed::derive(cfg.seed, &[1]));
        for p in &mut params {
            *p += cfg.init_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut model = reference.with_params(&params);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (loss, grad) = match loss_and_gradient(items, &model, reference, &cfg.loss) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                trace.push(f64::NAN);
                return Err(Error::Diverged { step, loss: f64::NAN, trace });
            }
            Err(e) => return Err(e),
        };
        trace.push(loss);
        if loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { step, loss, trace });
        }
        if step == cfg.steps {
            break;
        }
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        model = reference.with_params(&params);
    }
    Ok(TrainResult { model, trace })
}

/// Whether the two branches of a toy pair share their noise draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    #[default]
    Independent,
    Shared,
}

/// Synthetic latent pairs, one per score gap. Both clips share a smooth
/// temporal signal; along dim 0 the winner's velocity target has magnitude
/// 0.5 and the loser's `0.5 + 2 * gap`.
pub fn toy_pairs(gaps: &[f64], frames: usize, dims: usize, sharing: NoiseSharing, seed: u64) -> Result<Vec<DpoBatchItem>> {
    if gaps.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(Error::contract("score gaps must be positive"));
    }
    gaps.iter()
        .enumerate()
        .map(|(k, &gap)| {
            let mut rng = seed::rng(seed::derive(seed, &[k as u64]));
            let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
            let n = frames * dims;
            let eps_w = normal(n);
            let eps_l = match sharing {
                NoiseSharing::Independent => normal(n),
                NoiseSharing::Shared => eps_w.clone(),
            };
            let jitter = normal(n);
            let signs = normal(frames);
            let phases = normal(dims);
            let t = 0.05 + 0.9 * rng.random::<f64>();
            let mut x0_w = vec![0.0; n];
            let mut x0_l = vec![0.0; n];
            for f in 0..frames {
                let s = if signs[f] >= 0.0 { 1.0 } else { -1.0 };
                for d in 0..dims {
                    let i = f * dims + d;
                    if d == 0 {
                        x0_w[i] = eps_w[i] - s * 0.5;
                        x0_l[i] = eps_l[i] - s * (0.5 + 2.0 * gap);
                    } else {
                        let wave = (core::f64::consts::TAU * f as f64 / frames as f64 + phases[d]).sin();
                        x0_w[i] = wave + 0.3 * jitter[i];
                        x0_l[i] = x0_w[i];
                    }
                }
            }
            DpoBatchItem::new(
                LatentClip::new(frames, dims, x0_w)?,
                LatentClip::new(frames, dims, x0_l)?,
                LatentClip::new(frames, dims, eps_w)?,
                LatentClip::new(frames, dims, eps_l)?,
                t,
            )
        })
        .collect()
}

/// Short description of a convention for output metadata.
pub fn convention_name(c: Convention) -> String {
    match c {
        Convention::SelfConsistent => "self_consistent".into(),
        Convention::ReversedTime => "reversed_time".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    fn clip(frames: usize, dims: usize, seed: u64) -> LatentClip {
        let mut rng = seed::rng(seed);
        LatentClip::new(frames, dims, (0..frames * dims).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn random_item(frames: usize, dims: usize, seed: u64) -> DpoBatchItem {
        let t = seed::rng(seed ^ 0xabc).random::<f64>();
        DpoBatchItem::new(
            clip(frames, dims, seed * 4),
            clip(frames, dims, seed * 4 + 1),
            clip(frames, dims, seed * 4 + 2),
            clip(frames, dims, seed * 4 + 3),
            t,
        )
        .unwrap()
    }

    fn constant_model(dims: usize, value: f64) -> LinearVelocityModel {
        let mut p = vec![0.0; LinearVelocityModel::param_count(dims)];
        for d in 0..dims {
            p[dims * dims + dims + d] = value;
        }
        LinearVelocityModel::new(dims, p).unwrap()
    }

    fn max_abs_diff(a: &LatentClip, b: &LatentClip) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn schedule() {
        assert_eq!(beta_schedule(1.0, 3.7), 0.0);
        assert_eq!(beta_schedule(0.0, 2.0), 2.0);
        assert_eq!(beta_schedule(0.5, 1.0), 0.75);
    }

    #[test]
    fn interpolation_endpoints() {
        let (x0, eps) = (clip(3, 2, 1), clip(3, 2, 2));
        assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), eps);
        for t in [0.1, 0.5, 0.9] {
            assert!(max_abs_diff(&interpolate(&x0, &x0, t).unwrap(), &x0) < 1e-15);
        }
        assert!(interpolate(&x0, &clip(2, 2, 3), 0.5).is_err());
        assert!(target_velocity(&x0, &x0).unwrap().data().iter().all(|v| *v == 0.0));
        let zero = LatentClip::constant(3, 2, 0.0).unwrap();
        assert_eq!(target_velocity(&zero, &eps).unwrap(), eps);
    }

    #[test]
    fn velocity_is_time_derivative() {
        let (x0, eps) = (clip(4, 3, 5), clip(4, 3, 6));
        let v = target_velocity(&x0, &eps).unwrap();
        let h = 1e-6;
        for t in [0.2, 0.5, 0.8] {
            let up = interpolate(&x0, &eps, t + h).unwrap();
            let down = interpolate(&x0, &eps, t - h).unwrap();
            for i in 0..v.data().len() {
                let fd = (up.data()[i] - down.data()[i]) / (2.0 * h);
                assert!((fd - v.data()[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn clean_sample_reconstruction() {
        let (x0, eps) = (clip(5, 3, 7), clip(5, 3, 8));
        let v = target_velocity(&x0, &eps).unwrap();
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let x_t = interpolate(&x0, &eps, t).unwrap();
            let x0_hat = predict_clean(&x_t, t, &v, Convention::SelfConsistent).unwrap();
            assert!(max_abs_diff(&x0_hat, &x0) < 1e-12);
        }
        let x_t = interpolate(&x0, &eps, 0.0).unwrap();
        assert_eq!(predict_clean(&x_t, 0.0, &v, Convention::SelfConsistent).unwrap(), x_t);

        // The printed formula is exact under the reversed time convention.
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let x_t = x0.zip_with(&eps, |a, e| t * a + (1.0 - t) * e);
            let v = x0.zip_with(&eps, |a, e| a - e);
            let x0_hat = predict_clean(&x_t, t, &v, Convention::ReversedTime).unwrap();
            assert!(max_abs_diff(&x0_hat, &x0) < 1e-12);
        }
        // ...and not under the stated one.
        let x_t = interpolate(&x0, &eps, 0.5).unwrap();
        let x0_hat = predict_clean(&x_t, 0.5, &target_velocity(&x0, &eps).unwrap(), Convention::ReversedTime).unwrap();
        assert!(max_abs_diff(&x0_hat, &x0) > 0.1);
    }

    #[test]
    fn tiny_walkthrough() {
        let item = DpoBatchItem::new(
            LatentClip::new(2, 1, vec![0.0, 0.0]).unwrap(),
            LatentClip::new(2, 1, vec![1.0, 1.0]).unwrap(),
            LatentClip::new(2, 1, vec![1.0, 0.0]).unwrap(),
            LatentClip::new(2, 1, vec![1.0, 0.0]).unwrap(),
            0.5,
        )
        .unwrap();
        let theta = constant_model(1, 0.0);
        let reference = constant_model(1, 0.5);

        // x_t^w = (0.5, 0), v^w = (1, 0); x_t^l = (1, 0.5), v^l = (0, -1).
        let err_theta_w = 1.0f64.powi(2) + 0.0f64.powi(2);
        let err_ref_w = (1.0f64 - 0.5).powi(2) + (0.0f64 - 0.5).powi(2);
        let err_theta_l = 0.0f64.powi(2) + (-1.0f64).powi(2);
        let err_ref_l = (0.0f64 - 0.5).powi(2) + (-1.0f64 - 0.5).powi(2);
        let beta_t = 1.0 * (1.0 - 0.25);
        let inner = -beta_t / 2.0 * ((err_theta_w - err_ref_w) - (err_theta_l - err_ref_l));
        let expected = -(1.0 / (1.0 + (-inner).exp())).ln();

        let terms = dpo_terms(&item, &theta, &reference, 1.0).unwrap();
        assert_eq!(terms.err_theta_w, err_theta_w);
        assert_eq!(terms.err_ref_w, err_ref_w);
        assert_eq!(terms.err_theta_l, err_theta_l);
        assert_eq!(terms.err_ref_l, err_ref_l);
        assert_eq!(terms.beta_t, 0.75);
        assert_eq!(terms.inner, -0.75);
        assert!((terms.loss - expected).abs() < 1e-15);
        assert!((terms.loss - 1.7f64.exp().ln() + 1.7 - (1.0 + 0.75f64.exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn identities_at_zero_inner() {
        let item = random_item(4, 3, 1);
        let m = LinearVelocityModel::random(3, 0.5, 9);
        assert!((flow_dpo_loss(&item, &m, &m, 1.0).unwrap() - LN_2).abs() < 1e-12);
        let mut at_one = item.clone();
        at_one.t = 1.0;
        let other = LinearVelocityModel::random(3, 0.5, 10);
        assert!((flow_dpo_loss(&at_one, &other, &m, 2.0).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn swap_inequality() {
        for s in 0..200 {
            let item = random_item(3, 2, s);
            let theta = LinearVelocityModel::random(2, 0.8, 1000 + s);
            let reference = LinearVelocityModel::random(2, 0.8, 2000 + s);
            let swapped = DpoBatchItem::new(
                item.x0_l.clone(),
                item.x0_w.clone(),
                item.eps_l.clone(),
                item.eps_w.clone(),
                item.t,
            )
            .unwrap();
            let a = dpo_terms(&item, &theta, &reference, 1.5).unwrap();
            let b = dpo_terms(&swapped, &theta, &reference, 1.5).unwrap();
            assert!((a.inner + b.inner).abs() < 1e-9 * (1.0 + a.inner.abs()));
            assert!(a.loss > 0.0 && b.loss > 0.0);
            assert!(a.loss + b.loss >= 2.0 * LN_2 - 1e-15);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - LN_2).abs() < 1e-16);
        assert!((softplus(35.0) - (1.0 + 35f64.exp()).ln()).abs() < 1e-12);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn penalty_values() {
        let c = LatentClip::new(2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(temporal_penalty(&c, 0.001).unwrap(), -0.001);
        assert_eq!(temporal_penalty(&c, 0.0).unwrap(), 0.0);
        let flat = LatentClip::new(3, 2, vec![1.0, 4.0, 1.0, 4.0, 1.0, 4.0]).unwrap();
        assert_eq!(temporal_penalty(&flat, 0.5).unwrap(), 0.0);
        assert!(LatentClip::new(1, 2, vec![0.0, 0.0]).is_err());

        // Shift invariance and a direct variance oracle.
        let x = clip(6, 3, 4);
        let shifted = LatentClip::new(6, 3, x.data().iter().enumerate().map(|(i, v)| v + (i % 3) as f64 * 10.0).collect()).unwrap();
        let p = temporal_penalty(&x, 0.01).unwrap();
        assert!((p - temporal_penalty(&shifted, 0.01).unwrap()).abs() < 1e-12);
        let mut var = 0.0;
        for d in 0..3 {
            let col: Vec<f64> = (0..6).map(|f| x.get(f, d)).collect();
            let m = col.iter().sum::<f64>() / 6.0;
            var += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 6.0 / 3.0;
        }
        assert!((p + 0.01 * var).abs() < 1e-15);
    }

    #[test]
    fn total_loss_composition() {
        let item = random_item(4, 2, 3);
        let (theta, reference) = (LinearVelocityModel::random(2, 0.3, 1), LinearVelocityModel::random(2, 0.3, 2));
        let cfg = LossConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(
            total_loss(&item, &theta, &reference, &cfg).unwrap(),
            flow_dpo_loss(&item, &theta, &reference, 1.0).unwrap()
        );

        // Zero velocity at t = 0 predicts x0_hat = x0_w.
        let make = |w: Vec<f64>| {
            DpoBatchItem::new(
                LatentClip::new(2, 1, w).unwrap(),
                LatentClip::new(2, 1, vec![3.0, -1.0]).unwrap(),
                LatentClip::new(2, 1, vec![0.3, 0.7]).unwrap(),
                LatentClip::new(2, 1, vec![-0.2, 0.1]).unwrap(),
                0.0,
            )
            .unwrap()
        };
        let zero = LinearVelocityModel::zeros(1);
        let cfg = LossConfig::default();
        assert!((total_loss(&make(vec![1.0, 1.0]), &zero, &zero, &cfg).unwrap() - LN_2).abs() < 1e-15);
        assert!((total_loss(&make(vec![0.0, 2.0]), &zero, &zero, &cfg).unwrap() - (LN_2 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn grad_check_on_known_functions() {
        let p = [0.3, -1.2, 2.5];
        let quad = |q: &[f64]| Ok(q.iter().map(|v| v * v).sum::<f64>());
        let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        assert!(grad_check(quad, &g, &p, 1e-5).unwrap() < 1e-6);

        let cubic = |q: &[f64]| Ok(q.iter().map(|v| v * v * v).sum::<f64>());
        let g: Vec<f64> = p.iter().map(|v| 3.0 * v * v).collect();
        let fine = grad_check(cubic, &g, &p, 1e-5).unwrap();
        let coarse = grad_check(cubic, &g, &p, 1.0).unwrap();
        assert!(fine < 1e-8 && coarse > 0.1, "{fine} {coarse}");

        let bad = |_: &[f64]| Ok(f64::NAN);
        assert!(grad_check(bad, &[0.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let configs = [
            LossConfig::default(),
            LossConfig { lambda: 0.5, branch: PenaltyBranch::Both, ..Default::default() },
            LossConfig { lambda: 0.2, convention: Convention::ReversedTime, beta: 3.0, ..Default::default() },
        ];
        for (k, cfg) in configs.iter().enumerate() {
            for s in 0..10u64 {
                let dims = 2 + (s as usize % 4);
                let items: Vec<_> = (0..3).map(|i| random_item(5, dims, 100 * s + i + 7 * k as u64)).collect();
                let theta = LinearVelocityModel::random(dims, 0.4, s + 50);
                let reference = LinearVelocityModel::random(dims, 0.4, s + 90);
                let (loss, grad) = loss_and_gradient(&items, &theta, &reference, cfg).unwrap();
                assert!((loss - batch_loss(&items, &theta, &reference, cfg).unwrap()).abs() < 1e-12);
                let f = |p: &[f64]| batch_loss(&items, &LinearVelocityModel::new(dims, p.to_vec())?, &reference, cfg);
                let err = grad_check(f, &grad, theta.parameters(), 1e-5).unwrap();
                assert!(err < 1e-5, "config {k} seed {s}: {err}");
            }
        }
    }

    #[test]
    fn training_traces() {
        let items = toy_pairs(&[0.3, 0.2, 0.4, 0.25], 6, 3, NoiseSharing::Independent, 0).unwrap();
        let reference = LinearVelocityModel::random(3, 0.1, 0);

        let frozen = toy_train(&items, &reference, &TrainConfig { learning_rate: 0.0, steps: 20, ..Default::default() }).unwrap();
        assert_eq!(frozen.trace.len(), 21);
        assert!(frozen.trace.iter().all(|l| *l == frozen.trace[0]));

        let cfg = TrainConfig::default();
        let run = toy_train(&items, &reference, &cfg).unwrap();
        assert!(run.trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert!(run.trace[200] < run.trace[0]);
        let before = implicit_reward_margin(&items, &reference, &reference, 1.0).unwrap();
        let after = implicit_reward_margin(&items, &run.model, &reference, 1.0).unwrap();
        assert!(after > before);
        assert_eq!(run, toy_train(&items, &reference, &cfg).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let items = toy_pairs(&[0.3, 0.5], 4, 2, NoiseSharing::Shared, 1).unwrap();
        let reference = LinearVelocityModel::random(2, 0.1, 1);
        let cfg = TrainConfig { learning_rate: 1e4, steps: 50, ..Default::default() };
        match toy_train(&items, &reference, &cfg) {
            Err(Error::Diverged { step, trace, .. }) => assert_eq!(trace.len(), step + 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn toy_pairs_order_velocities() {
        for sharing in [NoiseSharing::Independent, NoiseSharing::Shared] {
            let items = toy_pairs(&[0.1, 0.3], 5, 2, sharing, 3).unwrap();
            for it in &items {
                let vw = target_velocity(&it.x0_w, &it.eps_w).unwrap();
                let vl = target_velocity(&it.x0_l, &it.eps_l).unwrap();
                for f in 0..5 {
                    assert!(vw.get(f, 0).abs() < vl.get(f, 0).abs());
                }
                assert_eq!(sharing == NoiseSharing::Shared, it.eps_w == it.eps_l);
            }
        }
        assert!(toy_pairs(&[0.0], 5, 2, NoiseSharing::Shared, 0).is_err());
    }
}

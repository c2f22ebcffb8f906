//! Negative-aware fine-tuning objective: group-normalized optimality
//! probabilities, implicit positive/negative velocity fields, and the
//! contrastive velocity and self-normalized x0-regression losses.

use crate::error::{Error, Result};
use crate::flowcore::{interpolate, predict_x0, target_velocity};
use crate::netdiff::VelocityField;
use crate::rewardlab::group_stats;

pub const DEFAULT_STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_DENOM_FLOOR: f64 = 1e-8;

/// One prompt's sampled outcomes with reward statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord {
    pub prompt: usize,
    pub samples: Vec<(Vec<f64>, f64)>,
    pub mean_raw: f64,
    pub std_raw: f64,
    pub z: f64,
    pub optimality: Vec<f64>,
    pub zero_std: bool,
}

impl GroupRecord {
    pub fn new(prompt: usize, samples: Vec<(Vec<f64>, f64)>, std_floor: f64) -> Result<Self> {
        let raw: Vec<f64> = samples.iter().map(|(_, r)| *r).collect();
        let (optimality, stats) = optimality_probability(&raw, std_floor)?;
        Ok(Self {
            prompt,
            samples,
            mean_raw: stats.mean,
            std_raw: stats.std,
            z: stats.z,
            optimality,
            zero_std: stats.zero_std,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub z: f64,
    pub zero_std: bool,
}

/// `r_i = 1/2 + 1/2 clip((raw_i - mean) / Z, -1, 1)` with `Z = max(std, floor)`.
/// Groups whose std falls below the floor get `r = 1/2` everywhere.
pub fn optimality_probability(raw: &[f64], std_floor: f64) -> Result<(Vec<f64>, GroupStats)> {
    let (mean, std, zero_std) = group_stats(raw, std_floor)?;
    let z = std.max(std_floor);
    let r = if zero_std {
        vec![0.5; raw.len()]
    } else {
        raw.iter()
            .map(|&x| 0.5 + 0.5 * ((x - mean) / z).clamp(-1.0, 1.0))
            .collect()
    };
    Ok((r, GroupStats { mean, std, z, zero_std }))
}

/// `v+ = (1 - beta) v_old + beta v_theta`, `v- = (1 + beta) v_old - beta v_theta`,
/// written as `v_old ± beta (v_theta - v_old)` so both equal `v_old` exactly
/// when the policies agree.
pub fn implicit_velocities(v_old: &[f64], v_theta: &[f64], beta: f64) -> (Vec<f64>, Vec<f64>) {
    let plus = v_old
        .iter()
        .zip(v_theta)
        .map(|(&o, &n)| o + beta * (n - o))
        .collect();
    let minus = v_old
        .iter()
        .zip(v_theta)
        .map(|(&o, &n)| o - beta * (n - o))
        .collect();
    (plus, minus)
}

/// Mean squared velocity difference (over coordinates).
pub fn kl_proxy(v_theta: &[f64], v_ref: &[f64]) -> f64 {
    let n = v_theta.len().max(1) as f64;
    v_theta
        .iter()
        .zip(v_ref)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossForm {
    /// Weighted contrastive velocity matching.
    Velocity,
    /// Self-normalized x0 regression.
    X0,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NftConfig {
    pub beta: f64,
    pub form: LossForm,
    pub beta_kl: f64,
    pub denom_floor: f64,
}

impl Default for NftConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            form: LossForm::X0,
            beta_kl: 1e-4,
            denom_floor: DEFAULT_DENOM_FLOOR,
        }
    }
}

/// One training example: a stored generated sample, a fresh noise draw and
/// timestep, the anchor condition, and its optimality probability.
#[derive(Debug, Clone, PartialEq)]
pub struct NftItem {
    pub x0: Vec<f64>,
    pub noise: Vec<f64>,
    pub t: f64,
    pub cond: Vec<f64>,
    pub r: f64,
}

impl NftItem {
    fn xt(&self) -> Result<Vec<f64>> {
        interpolate(&self.x0, &self.noise, self.t)
    }

    fn target(&self) -> Result<Vec<f64>> {
        target_velocity(&self.x0, &self.noise)
    }
}

fn check_batch(batch: &[NftItem], beta: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty NFT batch"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if let Some(i) = batch.iter().position(|it| !(0.0..=1.0).contains(&it.r)) {
        return Err(Error::invalid(format!("optimality probability of item {i} outside [0, 1]")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_abs_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

fn finite(stage: &'static str, index: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(stage, index, "loss term is not finite"))
    }
}

/// Contrastive velocity loss; accumulates `d/d(theta)` into `grad` when given.
pub fn nft_loss_velocity_grad(
    field: &VelocityField,
    old: &VelocityField,
    batch: &[NftItem],
    beta: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_batch(batch, beta)?;
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, item) in batch.iter().enumerate() {
        let xt = item.xt()?;
        let v = item.target()?;
        let cache = field.forward_cached(&xt, item.t, &item.cond)?;
        let v_old = old.forward(&xt, item.t, &item.cond)?;
        let (vp, vm) = implicit_velocities(&v_old, &cache.output, beta);
        let r = item.r;
        total += finite("nft_loss_velocity", i, r * sq_dist(&vp, &v) + (1.0 - r) * sq_dist(&vm, &v))?;
        if let Some(g) = grad.as_deref_mut() {
            let d_out: Vec<f64> = (0..v.len())
                .map(|j| inv_n * 2.0 * beta * (r * (vp[j] - v[j]) - (1.0 - r) * (vm[j] - v[j])))
                .collect();
            field.backward(&cache, &d_out, g);
        }
    }
    Ok(total * inv_n)
}

pub fn nft_loss_velocity(field: &VelocityField, old: &VelocityField, batch: &[NftItem], beta: f64) -> Result<f64> {
    nft_loss_velocity_grad(field, old, batch, beta, None)
}

/// Detached denominators `(mu|x+ - x0|, mu|x- - x0|)` per item, floored.
pub fn x0_denominators(
    field: &VelocityField,
    old: &VelocityField,
    batch: &[NftItem],
    beta: f64,
    floor: f64,
) -> Result<Vec<(f64, f64)>> {
    batch
        .iter()
        .map(|item| {
            let xt = item.xt()?;
            let v_theta = field.forward(&xt, item.t, &item.cond)?;
            let v_old = old.forward(&xt, item.t, &item.cond)?;
            let (vp, vm) = implicit_velocities(&v_old, &v_theta, beta);
            let xp = predict_x0(&xt, item.t, &vp)?;
            let xm = predict_x0(&xt, item.t, &vm)?;
            Ok((
                mean_abs_dist(&xp, &item.x0).max(floor),
                mean_abs_dist(&xm, &item.x0).max(floor),
            ))
        })
        .collect()
}

/// Self-normalized x0-regression loss. `denominators`, when supplied, are
/// used verbatim (the stop-gradient made explicit); otherwise they are
/// computed at the current parameters. Gradients never flow through them.
pub fn nft_loss_x0_grad(
    field: &VelocityField,
    old: &VelocityField,
    batch: &[NftItem],
    beta: f64,
    denom_floor: f64,
    denominators: Option<&[(f64, f64)]>,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_batch(batch, beta)?;
    if let Some(d) = denominators {
        if d.len() != batch.len() {
            return Err(Error::invalid("denominator count differs from batch size"));
        }
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, item) in batch.iter().enumerate() {
        let xt = item.xt()?;
        let cache = field.forward_cached(&xt, item.t, &item.cond)?;
        let v_old = old.forward(&xt, item.t, &item.cond)?;
        let (vp, vm) = implicit_velocities(&v_old, &cache.output, beta);
        let xp = predict_x0(&xt, item.t, &vp)?;
        let xm = predict_x0(&xt, item.t, &vm)?;
        let (dp, dm) = match denominators {
            Some(d) => d[i],
            None => (
                mean_abs_dist(&xp, &item.x0).max(denom_floor),
                mean_abs_dist(&xm, &item.x0).max(denom_floor),
            ),
        };
        let r = item.r;
        total += finite(
            "nft_loss_x0",
            i,
            r * sq_dist(&xp, &item.x0) / dp + (1.0 - r) * sq_dist(&xm, &item.x0) / dm,
        )?;
        if let Some(g) = grad.as_deref_mut() {
            // dx+/dv_theta = -t beta, dx-/dv_theta = +t beta
            let tb = item.t * beta;
            let d_out: Vec<f64> = (0..xp.len())
                .map(|j| {
                    inv_n * 2.0 * tb * (-r * (xp[j] - item.x0[j]) / dp + (1.0 - r) * (xm[j] - item.x0[j]) / dm)
                })
                .collect();
            field.backward(&cache, &d_out, g);
        }
    }
    Ok(total * inv_n)
}

pub fn nft_loss_x0(field: &VelocityField, old: &VelocityField, batch: &[NftItem], beta: f64) -> Result<f64> {
    nft_loss_x0_grad(field, old, batch, beta, DEFAULT_DENOM_FLOOR, None, None)
}

/// `mean_i kl_proxy(v_theta(i), v_ref(i))`, gradient scaled by `weight`.
pub fn kl_penalty_grad(
    field: &VelocityField,
    reference: &VelocityField,
    batch: &[NftItem],
    weight: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let inv_n = 1.0 / batch.len().max(1) as f64;
    let mut total = 0.0;
    for item in batch {
        let xt = item.xt()?;
        let cache = field.forward_cached(&xt, item.t, &item.cond)?;
        let v_ref = reference.forward(&xt, item.t, &item.cond)?;
        total += kl_proxy(&cache.output, &v_ref);
        if let Some(g) = grad.as_deref_mut() {
            let d = cache.output.len() as f64;
            let d_out: Vec<f64> = cache
                .output
                .iter()
                .zip(&v_ref)
                .map(|(a, b)| weight * inv_n * 2.0 * (a - b) / d)
                .collect();
            field.backward(&cache, &d_out, g);
        }
    }
    Ok(weight * total * inv_n)
}

/// Full policy objective: NFT loss in the configured form plus the
/// weighted velocity penalty toward the reference. A zero weight skips the
/// penalty entirely.
pub fn policy_loss_grad(
    field: &VelocityField,
    old: &VelocityField,
    reference: &VelocityField,
    batch: &[NftItem],
    cfg: &NftConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let mut loss = match cfg.form {
        LossForm::Velocity => nft_loss_velocity_grad(field, old, batch, cfg.beta, grad.as_deref_mut())?,
        LossForm::X0 => nft_loss_x0_grad(field, old, batch, cfg.beta, cfg.denom_floor, None, grad.as_deref_mut())?,
    };
    if cfg.beta_kl != 0.0 {
        loss += kl_penalty_grad(field, reference, batch, cfg.beta_kl, grad)?;
    }
    Ok(loss)
}

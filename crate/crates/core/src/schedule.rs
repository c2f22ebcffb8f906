//! Noise-aware condition interpolation and reference-anchored batching.

use crate::error::{check_same_len, Error, Result};

/// Where a condition came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    Original,
    Variant(usize),
    Interpolated { variant: usize, gamma: f64 },
}

/// Conditioning input for the velocity field. `pooled` is what the field
/// consumes; `tokens` optionally carries the per-token feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionContext {
    pub pooled: Vec<f64>,
    pub tokens: Option<Vec<Vec<f64>>>,
    pub provenance: Provenance,
}

impl ConditionContext {
    pub fn original(pooled: Vec<f64>) -> Self {
        Self {
            pooled,
            tokens: None,
            provenance: Provenance::Original,
        }
    }

    pub fn variant(k: usize, pooled: Vec<f64>) -> Self {
        Self {
            pooled,
            tokens: None,
            provenance: Provenance::Variant(k),
        }
    }

    pub fn with_tokens(mut self, tokens: Vec<Vec<f64>>) -> Self {
        self.tokens = Some(tokens);
        self
    }

    pub fn dim(&self) -> usize {
        self.pooled.len()
    }

    pub fn is_original(&self) -> bool {
        matches!(self.provenance, Provenance::Original)
    }
}

/// How the per-step condition is formed during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Ramp from the variant to the original as noise decays.
    NoiseAware,
    /// Variant used at every step (gamma = 1).
    Static,
}

/// Which representation gets interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpolationTarget {
    Pooled,
    PerToken,
}

/// Clipped linear ramp: 0 for `sigma_t <= 1 - rho`, rising to 1 at `sigma_t = 1`.
pub fn gamma(sigma_t: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("rho must lie in (0, 1], got {rho}")));
    }
    if !(0.0..=1.0).contains(&sigma_t) {
        return Err(Error::invalid(format!("sigma_t must lie in [0, 1], got {sigma_t}")));
    }
    // (sigma_t - 1) + rho keeps gamma(1) == 1 exactly
    Ok(((sigma_t - 1.0 + rho) / rho).clamp(0.0, 1.0))
}

/// `g * c_opt + (1 - g) * c_orig`. The per-token block is interpolated too
/// when both sides carry one.
pub fn interpolate_condition(
    c_opt: &ConditionContext,
    c_orig: &ConditionContext,
    g: f64,
) -> Result<ConditionContext> {
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::invalid(format!("interpolation weight must lie in [0, 1], got {g}")));
    }
    check_same_len("interpolate_condition", c_opt.dim(), c_orig.dim())?;
    let variant = match c_opt.provenance {
        Provenance::Variant(k) | Provenance::Interpolated { variant: k, .. } => k,
        Provenance::Original => 0,
    };
    // Endpoints are returned verbatim so g = 0 / g = 1 reproduce the inputs bit for bit.
    let mix = |a: f64, b: f64| {
        if g == 0.0 {
            b
        } else if g == 1.0 {
            a
        } else {
            g * a + (1.0 - g) * b
        }
    };
    let pooled = c_opt
        .pooled
        .iter()
        .zip(&c_orig.pooled)
        .map(|(&a, &b)| mix(a, b))
        .collect();
    let tokens = match (&c_opt.tokens, &c_orig.tokens) {
        (Some(a), Some(b)) => {
            check_same_len("interpolate_condition tokens", a.len(), b.len())?;
            let mut rows = Vec::with_capacity(a.len());
            for (ra, rb) in a.iter().zip(b) {
                check_same_len("interpolate_condition token row", ra.len(), rb.len())?;
                rows.push(ra.iter().zip(rb).map(|(&x, &y)| mix(x, y)).collect());
            }
            Some(rows)
        }
        _ => None,
    };
    Ok(ConditionContext {
        pooled,
        tokens,
        provenance: Provenance::Interpolated { variant, gamma: g },
    })
}

/// The condition used at solver time `t` for a batch slot. The anchor slot
/// never changes; variant slots follow the ramp (or stay fixed in static mode).
pub fn condition_at(
    slot: &ConditionContext,
    c_orig: &ConditionContext,
    t: f64,
    rho: f64,
    mode: ScheduleMode,
) -> Result<ConditionContext> {
    if slot.is_original() {
        return Ok(slot.clone());
    }
    let g = match mode {
        ScheduleMode::NoiseAware => gamma(t, rho)?,
        ScheduleMode::Static => 1.0,
    };
    interpolate_condition(slot, c_orig, g)
}

/// `[c_orig, variants...]`; slot 0 is the untouched anchor.
pub fn assemble_batch(
    c_orig: &ConditionContext,
    variants: &[ConditionContext],
) -> Vec<ConditionContext> {
    let mut batch = Vec::with_capacity(variants.len() + 1);
    batch.push(c_orig.clone());
    batch.extend(variants.iter().cloned());
    batch
}

//! Synthetic conditional-generation tasks: a ring of Gaussian modes, prompts
//! that name a target mode, and rewards computable in closed form.

use crate::error::{check_same_len, Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardFn {
    pub kind: RewardKind,
    /// Kernel width for the continuous reward.
    pub bandwidth: f64,
}

/// One prompt: its token sequence, the mode the reward asks for, and the
/// mode mixture the pretraining data pairs with it.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDef {
    pub tokens: Vec<u32>,
    pub target_mode: usize,
    pub base_mixture: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub data_dim: usize,
    pub radius: f64,
    pub mode_std: f64,
    pub centers: Vec<Vec<f64>>,
    pub prompts: Vec<PromptDef>,
}

impl TaskSpec {
    /// `modes` centers evenly spaced on a circle of `radius` in the first two
    /// coordinates; remaining coordinates are zero.
    pub fn ring(modes: usize, radius: f64, mode_std: f64, data_dim: usize) -> Result<Self> {
        if modes < 2 {
            return Err(Error::invalid(format!("need at least 2 modes, got {modes}")));
        }
        if data_dim < 2 {
            return Err(Error::invalid("ring tasks need data_dim >= 2"));
        }
        if !(radius > 0.0) || !(mode_std >= 0.0) {
            return Err(Error::invalid("radius must be positive and mode_std non-negative"));
        }
        let centers = (0..modes)
            .map(|m| {
                let a = 2.0 * std::f64::consts::PI * m as f64 / modes as f64;
                let mut c = vec![0.0; data_dim];
                c[0] = radius * a.cos();
                c[1] = radius * a.sin();
                c
            })
            .collect();
        Ok(Self { data_dim, radius, mode_std, centers, prompts: Vec::new() })
    }

    pub fn modes(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes() < 2 {
            return Err(Error::invalid("task needs at least 2 modes"));
        }
        for i in 0..self.modes() {
            check_same_len("task center", self.centers[i].len(), self.data_dim)?;
            for j in 0..i {
                if self.centers[i] == self.centers[j] {
                    return Err(Error::invalid(format!("mode centers {j} and {i} coincide")));
                }
            }
        }
        for (p, def) in self.prompts.iter().enumerate() {
            if def.target_mode >= self.modes() {
                return Err(Error::invalid(format!("prompt {p} targets missing mode {}", def.target_mode)));
            }
            if def.base_mixture.is_empty() || def.base_mixture.iter().any(|&(m, w)| m >= self.modes() || !(w > 0.0)) {
                return Err(Error::invalid(format!("prompt {p} has an invalid base mixture")));
            }
        }
        Ok(())
    }

    /// Index of the closest center; ties go to the lowest index.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (m, c) in self.centers.iter().enumerate() {
            let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = m;
            }
        }
        best
    }

    /// Draw a mode from prompt `p`'s base mixture.
    pub fn draw_base_mode(&self, p: usize, rng: &mut RngStream) -> usize {
        let mix = &self.prompts[p].base_mixture;
        let total: f64 = mix.iter().map(|(_, w)| w).sum();
        let mut u = rng.uniform() * total;
        for &(m, w) in mix {
            if u < w {
                return m;
            }
            u -= w;
        }
        mix.last().unwrap().0
    }
}

/// `n` draws from `N(center_mode, mode_std^2 I)`.
pub fn sample_task_data(task: &TaskSpec, mode: usize, n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    let center = task
        .centers
        .get(mode)
        .ok_or_else(|| Error::invalid(format!("mode {mode} out of range (M = {})", task.modes())))?;
    Ok((0..n)
        .map(|_| center.iter().map(|&c| c + task.mode_std * rng.normal()).collect())
        .collect())
}

/// `exp(-|x - target|^2 / bandwidth^2)`.
pub fn reward_continuous(x: &[f64], target: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (bandwidth * bandwidth)).exp()
}

/// 1 if the nearest mode is `target_mode`, else 0.
pub fn reward_discrete(x: &[f64], task: &TaskSpec, target_mode: usize) -> f64 {
    if task.nearest_mode(x) == target_mode {
        1.0
    } else {
        0.0
    }
}

impl RewardFn {
    pub fn evaluate(&self, x: &[f64], task: &TaskSpec, target_mode: usize) -> f64 {
        match self.kind {
            RewardKind::Discrete => reward_discrete(x, task, target_mode),
            RewardKind::Continuous => reward_continuous(x, &task.centers[target_mode], self.bandwidth),
        }
    }
}

/// Mean, population standard deviation, and whether the std is below `std_floor`.
pub fn group_stats(raw: &[f64], std_floor: f64) -> Result<(f64, f64, bool)> {
    if raw.len() < 2 {
        return Err(Error::invalid(format!("group needs at least 2 rewards, got {}", raw.len())));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok((mean, std, std < std_floor))
}

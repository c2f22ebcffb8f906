//! Run configuration and its flat `key = value` file format.
//!
//! One pair per line, `#` starts a comment. Missing keys fall back to the
//! defaults below; unknown keys are rejected.

use std::fs;
use std::path::Path;

use crate::embedx::EmbedOptConfig;
use crate::error::{Error, Result};
use crate::nftloss::{LossForm, NftConfig};
use crate::rewardlab::{RewardFn, RewardKind};
use crate::schedule::{InterpolationTarget, ScheduleMode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub seed: u64,

    // exploration budget
    pub g: usize,
    pub k: usize,
    pub iterations: usize,
    pub prompts_per_iter: usize,

    // embedding-perturbed exploration
    pub t_emb: usize,
    pub embed_lr: f64,
    pub sigma_init: f64,
    pub max_norm: f64,
    pub lambda_div: f64,
    pub mu: f64,
    pub eps: f64,
    pub rho: f64,
    pub schedule: ScheduleMode,
    pub interpolation: InterpolationTarget,
    pub cache_perturbations: bool,

    // policy optimization
    pub policy_lr: f64,
    pub weight_decay: f64,
    pub beta_kl: f64,
    pub grad_clip: f64,
    pub beta: f64,
    pub loss_form: LossForm,
    pub std_floor: f64,
    pub denom_floor: f64,
    pub policy_epochs: usize,
    pub minibatch_groups: usize,
    pub use_ema: bool,
    pub ema_decay: f64,

    // sampling
    pub train_sample_steps: usize,
    pub inference_steps: usize,
    pub noise_scale: f64,
    pub eval_samples: usize,

    // task and reward
    pub reward: RewardKind,
    pub reward_bandwidth: f64,
    pub task_modes: usize,
    pub task_radius: f64,
    pub task_mode_std: f64,
    pub data_dim: usize,
    pub hard_prompts: usize,
    pub hard_base_weight: f64,
    pub plain_spread: f64,

    // toy text side
    pub token_dim: usize,
    pub feature_dim: usize,
    pub token_norm: f64,
    pub encoder_gain: f64,

    // velocity field and pretraining
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_features: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,

    // diagnostics
    pub window: usize,
    pub smooth_alpha: f64,
    pub record_wallclock: bool,

    /// `(G, K)` pairs for the comparison harness.
    pub sweep: Vec<(usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            seed: 42,
            g: 4,
            k: 4,
            iterations: 400,
            prompts_per_iter: 4,
            t_emb: 300,
            embed_lr: 1e-3,
            sigma_init: 1e-4,
            max_norm: 0.05,
            lambda_div: 50.0,
            mu: 0.80,
            eps: 0.01,
            rho: 0.4,
            schedule: ScheduleMode::NoiseAware,
            interpolation: InterpolationTarget::Pooled,
            cache_perturbations: false,
            policy_lr: 3e-4,
            weight_decay: 1e-4,
            beta_kl: 1e-4,
            grad_clip: 1.0,
            beta: 1.0,
            loss_form: LossForm::X0,
            std_floor: 1e-6,
            denom_floor: 1e-8,
            policy_epochs: 1,
            minibatch_groups: 1,
            use_ema: true,
            ema_decay: 0.9,
            train_sample_steps: 10,
            inference_steps: 40,
            noise_scale: 0.0,
            eval_samples: 64,
            reward: RewardKind::Discrete,
            reward_bandwidth: 1.0,
            task_modes: 8,
            task_radius: 4.0,
            task_mode_std: 0.3,
            data_dim: 2,
            hard_prompts: 4,
            hard_base_weight: 0.03,
            plain_spread: 0.15,
            token_dim: 16,
            feature_dim: 128,
            token_norm: 0.1,
            encoder_gain: 2.0,
            hidden_width: 64,
            hidden_layers: 3,
            time_features: 8,
            pretrain_steps: 3000,
            pretrain_batch: 64,
            pretrain_lr: 1e-3,
            window: 20,
            smooth_alpha: 0.1,
            record_wallclock: false,
            sweep: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn embed_config(&self) -> EmbedOptConfig {
        EmbedOptConfig {
            steps: self.t_emb,
            lr: self.embed_lr,
            sigma_init: self.sigma_init,
            max_norm: self.max_norm,
            lambda_div: self.lambda_div,
            mu: self.mu,
            eps: self.eps,
        }
    }

    pub fn nft_config(&self) -> NftConfig {
        NftConfig {
            beta: self.beta,
            form: self.loss_form,
            beta_kl: self.beta_kl,
            denom_floor: self.denom_floor,
        }
    }

    pub fn reward_fn(&self) -> RewardFn {
        RewardFn { kind: self.reward, bandwidth: self.reward_bandwidth }
    }

    /// Cross-field checks; `line` is reported for errors that cannot be
    /// pinned to a single key.
    pub fn validate(&self) -> Result<()> {
        self.validate_at(&Default::default())
    }

    fn validate_at(&self, lines: &KeyLines) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(lines.get(key), key, msg));
        if self.g == 0 {
            return fail("G", "G must be at least 1".into());
        }
        if self.k == 0 {
            return fail("K", "K must be at least 1".into());
        }
        if self.g * self.k < 2 {
            let key = if lines.get("K") >= lines.get("G") { "K" } else { "G" };
            return fail(key, format!("G*K = {} but groups need at least 2 samples", self.g * self.k));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail("rho", format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.sigma_init > 0.0) {
            return fail("sigma_init", "sigma_init must be positive".into());
        }
        if !(self.max_norm > 0.0) {
            return fail("max_norm", "max_norm must be positive".into());
        }
        if self.eps < 0.0 {
            return fail("eps", "eps must be non-negative".into());
        }
        if !(self.beta > 0.0) {
            return fail("beta", "beta must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("ema_decay", "ema_decay must lie in [0, 1)".into());
        }
        if !(self.smooth_alpha > 0.0 && self.smooth_alpha <= 1.0) {
            return fail("smooth_alpha", "smooth_alpha must lie in (0, 1]".into());
        }
        if self.train_sample_steps == 0 {
            return fail("train_sample_steps", "need at least one sampling step".into());
        }
        if self.inference_steps == 0 {
            return fail("inference_steps", "need at least one sampling step".into());
        }
        if self.noise_scale < 0.0 {
            return fail("noise_scale", "noise_scale must be non-negative".into());
        }
        if self.task_modes < 2 {
            return fail("task_modes", "need at least 2 modes".into());
        }
        if self.data_dim < 2 {
            return fail("data_dim", "data_dim must be at least 2".into());
        }
        if self.hard_prompts > self.task_modes {
            return fail("hard_prompts", "at most one hard prompt per mode".into());
        }
        if !(self.hard_base_weight > 0.0 && self.hard_base_weight <= 1.0) {
            return fail("hard_base_weight", "hard_base_weight must lie in (0, 1]".into());
        }
        if !(0.0..0.5).contains(&self.plain_spread) {
            return fail("plain_spread", "plain_spread must lie in [0, 0.5)".into());
        }
        if self.prompts_per_iter == 0 {
            return fail("prompts_per_iter", "need at least one prompt per iteration".into());
        }
        if self.minibatch_groups == 0 {
            return fail("minibatch_groups", "need at least one group per mini-batch".into());
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return fail("hidden_layers", "network needs at least one hidden layer".into());
        }
        if self.window == 0 {
            return fail("window", "window must be positive".into());
        }
        if self.reward_bandwidth <= 0.0 {
            return fail("reward_bandwidth", "bandwidth must be positive".into());
        }
        if self.eval_samples < 1 {
            return fail("eval_samples", "need at least one evaluation sample".into());
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct KeyLines(Vec<(String, usize)>);

impl KeyLines {
    fn get(&self, key: &str) -> usize {
        self.0.iter().rev().find(|(k, _)| k == key).map_or(0, |(_, l)| *l)
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(line, key, format!("cannot parse `{value}`")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(line, key, format!("expected true/false, got `{value}`"))),
    }
}

/// `1x48,4x12,48x1`
pub fn parse_sweep(value: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (g, k) = pair
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| format!("sweep entry `{pair}` is not GxK"))?;
            let g = g.trim().parse().map_err(|_| format!("bad G in `{pair}`"))?;
            let k = k.trim().parse().map_err(|_| format!("bad K in `{pair}`"))?;
            Ok((g, k))
        })
        .collect()
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut lines = KeyLines::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line_no, line, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        lines.0.push((key.to_string(), line_no));
        let l = line_no;
        match key {
            "run_name" => cfg.run_name = value.to_string(),
            "seed" => cfg.seed = parse_num(l, key, value)?,
            "G" | "g" => cfg.g = parse_num(l, key, value)?,
            "K" | "k" => cfg.k = parse_num(l, key, value)?,
            "iterations" => cfg.iterations = parse_num(l, key, value)?,
            "prompts_per_iter" => cfg.prompts_per_iter = parse_num(l, key, value)?,
            "t_emb" => cfg.t_emb = parse_num(l, key, value)?,
            "embed_lr" => cfg.embed_lr = parse_num(l, key, value)?,
            "sigma_init" => cfg.sigma_init = parse_num(l, key, value)?,
            "max_norm" => cfg.max_norm = parse_num(l, key, value)?,
            "lambda_div" => cfg.lambda_div = parse_num(l, key, value)?,
            "mu" => cfg.mu = parse_num(l, key, value)?,
            "eps" => cfg.eps = parse_num(l, key, value)?,
            "rho" => cfg.rho = parse_num(l, key, value)?,
            "schedule" => {
                cfg.schedule = match value {
                    "noise_aware" => ScheduleMode::NoiseAware,
                    "static" => ScheduleMode::Static,
                    _ => return Err(Error::config(l, key, "expected noise_aware or static")),
                }
            }
            "interpolation" => {
                cfg.interpolation = match value {
                    "pooled" => InterpolationTarget::Pooled,
                    "per_token" => InterpolationTarget::PerToken,
                    _ => return Err(Error::config(l, key, "expected pooled or per_token")),
                }
            }
            "cache_perturbations" => cfg.cache_perturbations = parse_bool(l, key, value)?,
            "policy_lr" => cfg.policy_lr = parse_num(l, key, value)?,
            "weight_decay" => cfg.weight_decay = parse_num(l, key, value)?,
            "beta_kl" => cfg.beta_kl = parse_num(l, key, value)?,
            "grad_clip" => cfg.grad_clip = parse_num(l, key, value)?,
            "beta" => cfg.beta = parse_num(l, key, value)?,
            "loss_form" => {
                cfg.loss_form = match value {
                    "x0" => LossForm::X0,
                    "velocity" => LossForm::Velocity,
                    _ => return Err(Error::config(l, key, "expected x0 or velocity")),
                }
            }
            "std_floor" => cfg.std_floor = parse_num(l, key, value)?,
            "denom_floor" => cfg.denom_floor = parse_num(l, key, value)?,
            "policy_epochs" => cfg.policy_epochs = parse_num(l, key, value)?,
            "minibatch_groups" => cfg.minibatch_groups = parse_num(l, key, value)?,
            "use_ema" => cfg.use_ema = parse_bool(l, key, value)?,
            "ema_decay" => cfg.ema_decay = parse_num(l, key, value)?,
            "train_sample_steps" => cfg.train_sample_steps = parse_num(l, key, value)?,
            "inference_steps" => cfg.inference_steps = parse_num(l, key, value)?,
            "noise_scale" => cfg.noise_scale = parse_num(l, key, value)?,
            "eval_samples" => cfg.eval_samples = parse_num(l, key, value)?,
            "reward" => {
                cfg.reward = match value {
                    "discrete" => RewardKind::Discrete,
                    "continuous" => RewardKind::Continuous,
                    _ => return Err(Error::config(l, key, "expected discrete or continuous")),
                }
            }
            "reward_bandwidth" => cfg.reward_bandwidth = parse_num(l, key, value)?,
            "task_modes" => cfg.task_modes = parse_num(l, key, value)?,
            "task_radius" => cfg.task_radius = parse_num(l, key, value)?,
            "task_mode_std" => cfg.task_mode_std = parse_num(l, key, value)?,
            "data_dim" => cfg.data_dim = parse_num(l, key, value)?,
            "hard_prompts" => cfg.hard_prompts = parse_num(l, key, value)?,
            "hard_base_weight" => cfg.hard_base_weight = parse_num(l, key, value)?,
            "plain_spread" => cfg.plain_spread = parse_num(l, key, value)?,
            "token_dim" => cfg.token_dim = parse_num(l, key, value)?,
            "feature_dim" => cfg.feature_dim = parse_num(l, key, value)?,
            "token_norm" => cfg.token_norm = parse_num(l, key, value)?,
            "encoder_gain" => cfg.encoder_gain = parse_num(l, key, value)?,
            "hidden_width" => cfg.hidden_width = parse_num(l, key, value)?,
            "hidden_layers" => cfg.hidden_layers = parse_num(l, key, value)?,
            "time_features" => cfg.time_features = parse_num(l, key, value)?,
            "pretrain_steps" => cfg.pretrain_steps = parse_num(l, key, value)?,
            "pretrain_batch" => cfg.pretrain_batch = parse_num(l, key, value)?,
            "pretrain_lr" => cfg.pretrain_lr = parse_num(l, key, value)?,
            "window" => cfg.window = parse_num(l, key, value)?,
            "smooth_alpha" => cfg.smooth_alpha = parse_num(l, key, value)?,
            "record_wallclock" => cfg.record_wallclock = parse_bool(l, key, value)?,
            "sweep" => {
                cfg.sweep = parse_sweep(value).map_err(|m| Error::config(l, key, m))?;
                crate::cli::validate_sweep(&cfg.sweep).map_err(|e| match e {
                    Error::Config { message, .. } => Error::config(l, key, message),
                    other => other,
                })?;
            }
            _ => return Err(Error::config(l, key, "unknown key")),
        }
    }
    cfg.validate_at(&lines)?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_table_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sigma_init, 1e-4);
        assert_eq!(cfg.max_norm, 0.05);
        assert_eq!(cfg.lambda_div, 50.0);
        assert_eq!(cfg.mu, 0.80);
        assert_eq!(cfg.eps, 0.01);
        assert_eq!(cfg.rho, 0.4);
        assert_eq!(cfg.t_emb, 300);
        assert_eq!(cfg.embed_lr, 1e-3);
        assert_eq!(cfg.policy_lr, 3e-4);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.beta_kl, 1e-4);
        assert_eq!(cfg.grad_clip, 1.0);
        assert_eq!(cfg.train_sample_steps, 10);
        assert_eq!(cfg.inference_steps, 40);
        assert_eq!(cfg.seed, 42);
        assert!(cfg.use_ema);
    }

    #[test]
    fn rho_out_of_range_names_line() {
        let err = parse_config_str("# comment\nrho = 1.5\n").unwrap_err();
        match err {
            Error::Config { line, key, .. } => {
                assert_eq!(line, 2);
                assert_eq!(key, "rho");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn efficient_generation_setting() {
        let cfg = parse_config_str("K = 4\nG = 2  # trailing comment\n").unwrap();
        assert_eq!((cfg.g, cfg.k), (2, 4));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(parse_config_str("lora_rank = 32"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse_config_str("\n\nmu = abc"), Err(Error::Config { line: 3, .. })));
        assert!(matches!(parse_config_str("use_ema = maybe"), Err(Error::Config { .. })));
        assert!(matches!(parse_config_str("just words"), Err(Error::Config { .. })));
    }

    #[test]
    fn rejects_degenerate_budget() {
        let err = parse_config_str("G = 1\nK = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn sweep_parsing() {
        let cfg = parse_config_str("sweep = 1x48, 4x12,48x1").unwrap();
        assert_eq!(cfg.sweep, vec![(1, 48), (4, 12), (48, 1)]);
        assert!(parse_config_str("sweep = 4by12").is_err());
        assert!(matches!(parse_config_str("\nsweep = 1x48,2x12"), Err(Error::Config { line: 2, .. })));
    }
}

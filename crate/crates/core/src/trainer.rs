//! The fine-tuning loop: pretraining, per-iteration embedding optimization,
//! rollout collection under the old policy, contrastive policy updates on
//! the anchor condition, old-policy refresh and EMA tracking.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::diagnostics::{self, MetricsRow, ZeroStdWindow};
use crate::embedx::{apply_perturbation, optimize_embeddings, EmbedOutcome, EmbeddingTable, PromptSpec, EOS, SOS};
use crate::error::{Error, Result};
use crate::flowcore::{sample_trajectory, SamplePoint};
use crate::netdiff::{encoder_forward, fm_loss_grad, pool, semi_orthogonal, FieldShape, FrozenEncoder, VelocityField};
use crate::nftloss::{policy_loss_grad, GroupRecord, NftItem};
use crate::optim::{clip_grad_norm, l2_norm, Adam};
use crate::rewardlab::{PromptDef, TaskSpec};
use crate::rng::{RngStream, Stream};
use crate::schedule::{assemble_batch, condition_at, ConditionContext, InterpolationTarget};

const DIVERGENCE_LIMIT: f64 = 1e6;
const HELDOUT_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum LogLevel {
    #[default]
    Quiet,
    Info,
    Debug,
}

impl LogLevel {
    /// Reads `E2PO_LOG`; unset means `Info`.
    pub fn from_env() -> Result<Self> {
        match std::env::var("E2PO_LOG") {
            Err(_) => Ok(LogLevel::Info),
            Ok(v) => match v.as_str() {
                "quiet" => Ok(LogLevel::Quiet),
                "info" | "" => Ok(LogLevel::Info),
                "debug" => Ok(LogLevel::Debug),
                other => Err(Error::invalid(format!("E2PO_LOG must be quiet, info or debug, got `{other}`"))),
            },
        }
    }
}

/// The synthetic task plus its toy text side: vocabulary embeddings, the
/// frozen encoder and the pooled anchor feature of every prompt.
#[derive(Debug, Clone)]
pub struct World {
    pub task: TaskSpec,
    pub table: EmbeddingTable,
    pub encoder: FrozenEncoder,
    pub prompts: Vec<PromptSpec>,
    pub anchors: Vec<Vec<f64>>,
}

/// Token id of the word naming mode `m`.
pub fn mode_word(m: usize) -> u32 {
    3 + m as u32
}

impl World {
    /// Ring of `task_modes` modes. Every mode gets a plain prompt
    /// `[SOS, word_m, plain, EOS]` whose pretraining data is that mode. The
    /// first `hard_prompts` modes also get `[SOS, word_m, twisted, EOS]`,
    /// which still asks for mode `m` but whose pretraining data mostly comes
    /// from the neighbouring mode, so the reference model rarely satisfies it.
    /// Both kinds have two content tokens, so perturbations act on prompts
    /// of the same shape.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let m = cfg.task_modes;
        let mut task = TaskSpec::ring(m, cfg.task_radius, cfg.task_mode_std, cfg.data_dim)?;
        let plain = mode_word(m);
        let modifier = mode_word(m + 1);
        for mode in 0..m {
            task.prompts.push(PromptDef {
                tokens: vec![SOS, mode_word(mode), plain, EOS],
                target_mode: mode,
                base_mixture: plain_mixture(mode, m, cfg.plain_spread),
            });
        }
        for mode in 0..cfg.hard_prompts {
            let mut mix = vec![((mode + 1) % m, 1.0 - cfg.hard_base_weight)];
            if cfg.hard_base_weight > 0.0 {
                mix.push((mode, cfg.hard_base_weight));
            }
            mix.retain(|&(_, w)| w > 0.0);
            task.prompts.push(PromptDef {
                tokens: vec![SOS, mode_word(mode), modifier, EOS],
                target_mode: mode,
                base_mixture: mix,
            });
        }
        task.validate()?;

        let table = vocabulary(modifier as usize + 1, cfg);
        let encoder = FrozenEncoder::new(cfg.token_dim, cfg.feature_dim, cfg.encoder_gain, cfg.seed);
        let prompts = task
            .prompts
            .iter()
            .map(|p| PromptSpec::new(p.tokens.clone(), &table))
            .collect::<Result<Vec<_>>>()?;
        let anchors = prompts
            .iter()
            .map(|p| crate::embedx::anchor_embedding(p, &encoder))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { task, table, encoder, prompts, anchors })
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn target(&self, p: usize) -> usize {
        self.task.prompts[p].target_mode
    }

    pub fn anchor_condition(&self, p: usize) -> ConditionContext {
        ConditionContext::original(self.anchors[p].clone())
    }

    /// Per-token features of prompt `p` (index-set rows only).
    fn token_features(&self, p: usize, embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let feats = encoder_forward(&self.encoder, embeddings)?;
        Ok(self.prompts[p].index_set.iter().map(|&i| feats[i].clone()).collect())
    }
}

/// Target mode with weight `1 - 2 spread`, each ring neighbour `spread`.
fn plain_mixture(mode: usize, m: usize, spread: f64) -> Vec<(usize, f64)> {
    if spread == 0.0 {
        return vec![(mode, 1.0)];
    }
    vec![((mode + m - 1) % m, spread), (mode, 1.0 - 2.0 * spread), ((mode + 1) % m, spread)]
}

/// Token embeddings of norm `token_norm`: mutually orthogonal (a randomly
/// rotated one-hot code) when the vocabulary fits in `token_dim`, random
/// directions otherwise.
fn vocabulary(vocab: usize, cfg: &RunConfig) -> EmbeddingTable {
    let mut rng = RngStream::derive(cfg.seed, Stream::Task, &[0x7AB]);
    let d = cfg.token_dim;
    let rows = if vocab <= d {
        semi_orthogonal(vocab, d, &mut rng)
            .chunks(d)
            .map(|r| r.iter().map(|x| cfg.token_norm * x).collect())
            .collect()
    } else {
        (0..vocab)
            .map(|_| {
                let v = rng.normal_vec(d);
                let n = l2_norm(&v).max(1e-12);
                v.into_iter().map(|x| cfg.token_norm * x / n).collect()
            })
            .collect()
    };
    EmbeddingTable::from_rows(rows)
}

pub fn field_shape(cfg: &RunConfig) -> FieldShape {
    FieldShape {
        data_dim: cfg.data_dim,
        time_features: cfg.time_features,
        cond_dim: cfg.feature_dim,
        hidden: vec![cfg.hidden_width; cfg.hidden_layers],
    }
}

pub fn init_field(cfg: &RunConfig) -> VelocityField {
    VelocityField::new(field_shape(cfg), &mut RngStream::derive(cfg.seed, Stream::Init, &[]))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub field: VelocityField,
    /// Training-batch loss at every step.
    pub loss_curve: Vec<f64>,
    pub heldout_initial: f64,
    pub heldout_final: f64,
}

fn fm_batch(world: &World, n: usize, rng: &mut RngStream) -> Result<Vec<(SamplePoint, Vec<f64>)>> {
    (0..n)
        .map(|_| {
            let p = rng.below(world.num_prompts());
            let mode = world.task.draw_base_mode(p, rng);
            let x0 = crate::rewardlab::sample_task_data(&world.task, mode, 1, rng)?.remove(0);
            let x1 = rng.normal_vec(world.task.data_dim);
            let t = rng.uniform_open_closed();
            Ok((SamplePoint::new(x0, x1, t)?, world.anchors[p].clone()))
        })
        .collect()
}

/// Flow-matching pretraining over every prompt's base mixture.
pub fn pretrain_flow(world: &World, cfg: &RunConfig) -> Result<PretrainOutcome> {
    let mut field = init_field(cfg);
    let heldout = fm_batch(world, HELDOUT_SIZE, &mut RngStream::derive(cfg.seed, Stream::Pretrain, &[u64::MAX]))?;
    let heldout_initial = fm_loss_grad(&field, &heldout, None)?;
    let mut opt = Adam::new(field.num_params(), cfg.pretrain_lr);
    let mut rng = RngStream::derive(cfg.seed, Stream::Pretrain, &[0]);
    let mut loss_curve = Vec::with_capacity(cfg.pretrain_steps);
    let mut grad = vec![0.0; field.num_params()];
    for step in 0..cfg.pretrain_steps {
        let batch = fm_batch(world, cfg.pretrain_batch.max(1), &mut rng)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = fm_loss_grad(&field, &batch, Some(&mut grad))?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::numeric("pretrain_flow", step, format!("flow-matching loss diverged ({loss})")));
        }
        loss_curve.push(loss);
        opt.step(field.params_mut(), &grad);
    }
    let heldout_final = fm_loss_grad(&field, &heldout, None)?;
    Ok(PretrainOutcome { field, loss_curve, heldout_initial, heldout_final })
}

/// `ema <- decay * ema + (1 - decay) * theta`.
pub fn ema_update(ema: &mut VelocityField, theta: &VelocityField, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::invalid(format!("EMA decay must lie in [0, 1), got {decay}")));
    }
    ema.blend_from(theta, decay)
}

/// One prompt's rollouts for one iteration.
#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub prompt: usize,
    pub anchor: ConditionContext,
    /// The full condition batch `[anchor, variants...]` used for sampling.
    pub conditions: Vec<ConditionContext>,
    /// Samples ordered seed-major: index `j * K + k`.
    pub group: GroupRecord,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub theta: VelocityField,
    pub theta_old: VelocityField,
    pub theta_ref: VelocityField,
    pub theta_ema: VelocityField,
    pub iteration: usize,
    pub buffer: Vec<BufferEntry>,
    opt: Adam,
    ref_checksum: u64,
}

impl TrainState {
    pub fn new(reference: VelocityField, cfg: &RunConfig) -> Self {
        let opt = Adam::new(reference.num_params(), cfg.policy_lr).with_weight_decay(cfg.weight_decay);
        Self {
            theta: reference.clone(),
            theta_old: reference.clone(),
            theta_ema: reference.clone(),
            ref_checksum: reference.checksum(),
            theta_ref: reference,
            iteration: 0,
            buffer: Vec::new(),
            opt,
        }
    }

    pub fn ref_checksum(&self) -> u64 {
        self.ref_checksum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub per_prompt: Vec<f64>,
    pub mode_coverage: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    pub eval: EvalReport,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub world: World,
    pub state: TrainState,
    pub log: LogLevel,
    rows: Vec<MetricsRow>,
    window: ZeroStdWindow,
    smoothed_std: Option<f64>,
    cache: Vec<Option<EmbedOutcome>>,
    started: Instant,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("run", &self.cfg.run_name)
            .field("seed", &self.cfg.seed)
            .field("iteration", &self.state.iteration)
            .finish()
    }
}

impl Trainer {
    pub fn new(cfg: RunConfig, world: World, reference: VelocityField) -> Result<Self> {
        cfg.validate()?;
        if reference.shape() != &field_shape(&cfg) {
            return Err(Error::invalid("reference model shape does not match the config"));
        }
        let state = TrainState::new(reference, &cfg);
        let n = world.num_prompts();
        Ok(Self {
            window: ZeroStdWindow::new(cfg.window),
            cfg,
            world,
            state,
            log: LogLevel::Quiet,
            rows: Vec::new(),
            smoothed_std: None,
            cache: vec![None; n],
            started: Instant::now(),
        })
    }

    /// Builds the world and pretrains the reference from the config alone.
    pub fn from_config(cfg: RunConfig) -> Result<Self> {
        let world = World::build(&cfg)?;
        let pre = pretrain_flow(&world, &cfg)?;
        Self::new(cfg, world, pre.field)
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Prompt indices for iteration `iter`: a fresh permutation, cycled if
    /// more prompts are requested than exist.
    pub fn sample_prompts(&self, iter: usize) -> Vec<usize> {
        let n = self.world.num_prompts();
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::derive(self.cfg.seed, Stream::Prompts, &[iter as u64]).shuffle(&mut order);
        (0..self.cfg.prompts_per_iter).map(|i| order[i % n]).collect()
    }

    /// Optimized perturbations for each prompt (`None` when K = 1).
    pub fn explore_embeddings(&mut self, iter: usize, prompts: &[usize]) -> Result<Vec<Option<EmbedOutcome>>> {
        if self.cfg.k < 2 {
            return Ok(vec![None; prompts.len()]);
        }
        let ecfg = self.cfg.embed_config();
        let (seed, k, cached) = (self.cfg.seed, self.cfg.k, self.cfg.cache_perturbations);
        let world = &self.world;
        let cache = &self.cache;
        let fresh: Vec<Result<Option<EmbedOutcome>>> = prompts
            .par_iter()
            .map(|&p| {
                if cached {
                    if let Some(o) = &cache[p] {
                        return Ok(Some(o.clone()));
                    }
                }
                let key = if cached { 0 } else { iter as u64 };
                let mut rng = RngStream::derive(seed, Stream::Embed, &[key, p as u64]);
                optimize_embeddings(&world.prompts[p], &world.encoder, k, &ecfg, &mut rng).map(Some)
            })
            .collect();
        let out = fresh.into_iter().collect::<Result<Vec<_>>>()?;
        if cached {
            for (&p, o) in prompts.iter().zip(&out) {
                if self.cache[p].is_none() {
                    self.cache[p] = o.clone();
                }
            }
        }
        Ok(out)
    }

    fn variant_conditions(&self, p: usize, outcome: &EmbedOutcome) -> Result<Vec<ConditionContext>> {
        let mut conds = outcome.conditions();
        if self.cfg.interpolation == InterpolationTarget::PerToken {
            for (c, delta) in conds.iter_mut().zip(outcome.set.deltas()) {
                let emb = apply_perturbation(&self.world.prompts[p], delta)?;
                c.tokens = Some(self.world.token_features(p, &emb)?);
            }
        }
        Ok(conds)
    }

    fn anchor_for_sampling(&self, p: usize) -> Result<ConditionContext> {
        let anchor = self.world.anchor_condition(p);
        if self.cfg.interpolation == InterpolationTarget::PerToken {
            let tokens = self.world.token_features(p, &self.world.prompts[p].embeddings)?;
            return Ok(anchor.with_tokens(tokens));
        }
        Ok(anchor)
    }

    /// Samples `G x K` trajectories per prompt with the old policy and
    /// records rewards and optimality probabilities. Prompts are sampled in
    /// parallel; every draw comes from a stream keyed by
    /// `(iteration, batch slot, seed, variant)`, so the result is independent
    /// of scheduling.
    pub fn collect_rollouts(
        &self,
        iter: usize,
        prompts: &[usize],
        outcomes: &[Option<EmbedOutcome>],
    ) -> Result<Vec<BufferEntry>> {
        if prompts.len() != outcomes.len() {
            return Err(Error::invalid("one exploration outcome per prompt expected"));
        }
        let cfg = &self.cfg;
        let reward = cfg.reward_fn();
        let entries: Vec<Result<BufferEntry>> = prompts
            .par_iter()
            .zip(outcomes.par_iter())
            .enumerate()
            .map(|(slot, (&p, outcome))| {
                let anchor = self.anchor_for_sampling(p)?;
                let variants = match outcome {
                    Some(o) => self.variant_conditions(p, o)?,
                    None => Vec::new(),
                };
                let batch = assemble_batch(&anchor, &variants);
                if batch.len() != cfg.k {
                    return Err(Error::invalid(format!(
                        "condition batch has {} entries, expected K = {}",
                        batch.len(),
                        cfg.k
                    )));
                }
                let per_token = cfg.interpolation == InterpolationTarget::PerToken;
                let index_rows: Vec<usize> = (0..self.world.prompts[p].index_set.len()).collect();
                let mut samples = Vec::with_capacity(cfg.g * cfg.k);
                for j in 0..cfg.g {
                    let x1 = RngStream::derive(cfg.seed, Stream::Rollout, &[iter as u64, slot as u64, j as u64])
                        .normal_vec(cfg.data_dim);
                    for (k, slot_cond) in batch.iter().enumerate() {
                        let mut noise =
                            RngStream::derive(cfg.seed, Stream::RolloutNoise, &[iter as u64, slot as u64, j as u64, k as u64]);
                        let traj = sample_trajectory(
                            &self.state.theta_old,
                            &x1,
                            |_, t| {
                                let mut c = condition_at(slot_cond, &anchor, t, cfg.rho, cfg.schedule)?;
                                if per_token && !c.is_original() {
                                    if let Some(tok) = &c.tokens {
                                        c.pooled = pool(tok, &index_rows)?;
                                    }
                                }
                                Ok(c)
                            },
                            cfg.train_sample_steps,
                            cfg.noise_scale,
                            &mut noise,
                        )
                        .map_err(|e| Error::Rollout { prompt: p, seed: j, variant: k, source: Box::new(e) })?;
                        let x0 = traj.final_state().to_vec();
                        let r = reward.evaluate(&x0, &self.world.task, self.world.target(p));
                        samples.push((x0, r));
                    }
                }
                let group = GroupRecord::new(p, samples, cfg.std_floor)?;
                Ok(BufferEntry { prompt: p, anchor: self.world.anchor_condition(p), conditions: batch, group })
            })
            .collect();
        entries.into_iter().collect()
    }

    /// Training items for one mini-batch. Reads only the stored samples,
    /// their optimality probabilities and the anchor condition.
    pub fn update_items(&self, iter: usize, epoch: usize, first_entry: usize, entries: &[BufferEntry]) -> Vec<NftItem> {
        let mut items = Vec::new();
        for (e, entry) in entries.iter().enumerate() {
            for (s, ((x0, _), &r)) in entry.group.samples.iter().zip(&entry.group.optimality).enumerate() {
                let mut rng = RngStream::derive(
                    self.cfg.seed,
                    Stream::Loss,
                    &[iter as u64, epoch as u64, (first_entry + e) as u64, s as u64],
                );
                let noise = rng.normal_vec(x0.len());
                let t = rng.uniform_open_closed();
                items.push(NftItem { x0: x0.clone(), noise, t, cond: entry.anchor.pooled.clone(), r });
            }
        }
        items
    }

    /// Loss and gradient at the current `theta` for one mini-batch.
    pub fn update_gradient(&self, items: &[NftItem]) -> Result<(f64, Vec<f64>)> {
        let s = &self.state;
        let nft = self.cfg.nft_config();
        crate::netdiff::loss_and_grad(&s.theta, |field, grad| {
            policy_loss_grad(field, &s.theta_old, &s.theta_ref, items, &nft, Some(grad))
        })
    }

    /// One pass over the buffer per epoch, one clipped AdamW step per
    /// mini-batch, EMA after every step.
    pub fn policy_update(&mut self, iter: usize) -> Result<UpdateStats> {
        if self.state.buffer.is_empty() {
            return Err(Error::Precondition("policy update called with an empty rollout buffer".into()));
        }
        let mut stats = UpdateStats::default();
        let chunk = self.cfg.minibatch_groups;
        for epoch in 0..self.cfg.policy_epochs {
            let mut first = 0;
            while first < self.state.buffer.len() {
                let end = (first + chunk).min(self.state.buffer.len());
                let items = self.update_items(iter, epoch, first, &self.state.buffer[first..end]);
                let (loss, mut grad) = self.update_gradient(&items)?;
                let norm = clip_grad_norm(&mut grad, self.cfg.grad_clip);
                self.state.opt.step(self.state.theta.params_mut(), &grad);
                if let Some(i) = self.state.theta.params().iter().position(|p| !p.is_finite()) {
                    return Err(Error::numeric("policy_update", i, "parameter became non-finite"));
                }
                if self.cfg.use_ema {
                    ema_update(&mut self.state.theta_ema, &self.state.theta, self.cfg.ema_decay)?;
                }
                stats.steps += 1;
                stats.mean_loss += loss;
                stats.mean_grad_norm += norm;
                first = end;
            }
        }
        if stats.steps > 0 {
            stats.mean_loss /= stats.steps as f64;
            stats.mean_grad_norm /= stats.steps as f64;
        }
        Ok(stats)
    }

    /// One full iteration; returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let iter = self.state.iteration;
        let prompts = self.sample_prompts(iter);
        let outcomes = self.explore_embeddings(iter, &prompts)?;
        let entries = self.collect_rollouts(iter, &prompts, &outcomes)?;
        self.state.buffer = entries;
        let row = self.metrics_row(iter + 1, &outcomes)?;
        let stats = self.policy_update(iter)?;

        self.state.theta_old = self.state.theta.clone();
        self.state.buffer.clear();
        if self.state.theta_ref.checksum() != self.state.ref_checksum {
            return Err(Error::Precondition("reference model changed during training".into()));
        }
        self.state.iteration += 1;
        self.rows.push(row.clone());

        if self.log >= LogLevel::Info {
            println!(
                "iter={} reward_mean={:.6} reward_std={:.6} zero_std_ratio={:.4}",
                row.iteration, row.reward_mean, row.reward_std, row.zero_std_ratio
            );
        }
        if self.log >= LogLevel::Debug {
            println!(
                "  loss={:.6e} grad_norm={:.4e} steps={} l_emb={:.5} coverage={:.4} dispersion={:.4}",
                stats.mean_loss, stats.mean_grad_norm, stats.steps, row.l_emb_final, row.mode_coverage, row.dispersion
            );
        }
        Ok(row)
    }

    fn metrics_row(&mut self, iteration: usize, outcomes: &[Option<EmbedOutcome>]) -> Result<MetricsRow> {
        let groups = &self.state.buffer;
        let n = groups.len() as f64;
        let mut reward_sum = 0.0;
        let mut count = 0usize;
        let (mut std_sum, mut disp_sum, mut cov_sum) = (0.0, 0.0, 0.0);
        for g in groups {
            reward_sum += g.group.samples.iter().map(|(_, r)| r).sum::<f64>();
            count += g.group.samples.len();
            std_sum += g.group.std_raw;
            let xs: Vec<Vec<f64>> = g.group.samples.iter().map(|(x, _)| x.clone()).collect();
            disp_sum += diagnostics::dispersion(&xs)?;
            cov_sum += diagnostics::mode_coverage(&xs, &self.world.task);
            self.window.push(g.group.zero_std);
        }
        let reward_std = std_sum / n;
        let smoothed = match self.smoothed_std {
            None => reward_std,
            Some(s) => self.cfg.smooth_alpha * reward_std + (1.0 - self.cfg.smooth_alpha) * s,
        };
        self.smoothed_std = Some(smoothed);
        let l_emb: Vec<f64> = outcomes.iter().flatten().map(|o| o.final_loss()).collect();
        let l_emb_final = if l_emb.is_empty() { 0.0 } else { l_emb.iter().sum::<f64>() / l_emb.len() as f64 };
        Ok(MetricsRow {
            iteration,
            reward_mean: reward_sum / count as f64,
            reward_std,
            zero_std_ratio: self.window.ratio()?,
            smoothed_std: smoothed,
            dispersion: disp_sum / n,
            mode_coverage: cov_sum / n,
            l_emb_final,
            wallclock_s: if self.cfg.record_wallclock { self.started.elapsed().as_secs_f64() } else { 0.0 },
        })
    }

    /// Runs the remaining iterations and evaluates the final model.
    pub fn run(&mut self) -> Result<RunOutcome> {
        self.started = Instant::now();
        while self.state.iteration < self.cfg.iterations {
            self.step()?;
        }
        let eval = self.evaluate()?;
        Ok(RunOutcome { rows: self.rows.clone(), eval })
    }

    /// The model used for evaluation: EMA weights when enabled.
    pub fn eval_model(&self) -> &VelocityField {
        if self.cfg.use_ema {
            &self.state.theta_ema
        } else {
            &self.state.theta
        }
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate_model(self.eval_model(), &self.world, &self.cfg)
    }

    /// Like [`Trainer::run`], but writes the metrics CSV and final
    /// checkpoints into `out`. On failure the last consistent policy (the
    /// one that collected the failed iteration's rollouts) is saved first.
    pub fn run_to_dir(&mut self, out: &Path) -> Result<RunOutcome> {
        let stem = format!("{}_{}", self.cfg.run_name, self.cfg.seed);
        match self.run() {
            Ok(outcome) => {
                diagnostics::export_csv(&outcome.rows, &metrics_path(out, &self.cfg))?;
                self.state.theta.save_checkpoint(&out.join(format!("policy_{stem}.ckpt")))?;
                self.state.theta_ema.save_checkpoint(&out.join(format!("ema_{stem}.ckpt")))?;
                Ok(outcome)
            }
            Err(e) => {
                let _ = diagnostics::export_csv(&self.rows, &metrics_path(out, &self.cfg));
                let _ = self.state.theta_old.save_checkpoint(&out.join(format!("abort_{stem}.ckpt")));
                Err(e)
            }
        }
    }
}

pub fn metrics_path(out: &Path, cfg: &RunConfig) -> PathBuf {
    out.join(diagnostics::metrics_file_name(&cfg.run_name, cfg.seed))
}

/// Mean reward of ODE samples conditioned on each prompt's anchor, using
/// the inference step count. Starting points depend only on the seed, so
/// every configuration sharing a seed is scored on the same draws.
pub fn evaluate_model(field: &VelocityField, world: &World, cfg: &RunConfig) -> Result<EvalReport> {
    let reward = cfg.reward_fn();
    let per: Vec<Result<(f64, Vec<Vec<f64>>)>> = (0..world.num_prompts())
        .into_par_iter()
        .map(|p| {
            let anchor = world.anchor_condition(p);
            let mut total = 0.0;
            let mut xs = Vec::with_capacity(cfg.eval_samples);
            for n in 0..cfg.eval_samples {
                let mut rng = RngStream::derive(cfg.seed, Stream::Eval, &[p as u64, n as u64]);
                let x1 = rng.normal_vec(cfg.data_dim);
                let traj = sample_trajectory(field, &x1, |_, _| Ok(anchor.clone()), cfg.inference_steps, 0.0, &mut rng)
                    .map_err(|e| Error::Rollout { prompt: p, seed: n, variant: 0, source: Box::new(e) })?;
                total += reward.evaluate(traj.final_state(), &world.task, world.target(p));
                xs.push(traj.final_state().to_vec());
            }
            Ok((total / cfg.eval_samples as f64, xs))
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let per_prompt: Vec<f64> = per.iter().map(|(r, _)| *r).collect();
    let mean_reward = per_prompt.iter().sum::<f64>() / per_prompt.len() as f64;
    let mode_coverage = per
        .iter()
        .map(|(_, xs)| diagnostics::mode_coverage(xs, &world.task))
        .sum::<f64>()
        / per.len() as f64;
    Ok(EvalReport { mean_reward, per_prompt, mode_coverage })
}

/// Accuracy of the reference model at hitting the mode each plain prompt
/// names (base-mixture prompts only, where the data matches the target).
pub fn plain_prompt_accuracy(field: &VelocityField, world: &World, cfg: &RunConfig) -> Result<f64> {
    let rep = evaluate_model(field, world, cfg)?;
    let plain: Vec<f64> = (0..world.num_prompts())
        .filter(|&p| p < world.task.modes())
        .map(|p| rep.per_prompt[p])
        .collect();
    Ok(plain.iter().sum::<f64>() / plain.len().max(1) as f64)
}

//! Command-line runner and the G x K budget comparison harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config::{parse_config, RunConfig};
use crate::diagnostics::{self, MetricsRow};
use crate::error::{Error, Result};
use crate::netdiff::VelocityField;
use crate::trainer::{plain_prompt_accuracy, pretrain_flow, LogLevel, Trainer, World};

#[derive(Debug, Parser)]
#[command(name = "e2po", version, about = "Embedding-perturbed exploration on toy flow-matching tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeName {
    Pretrain,
    Train,
    Compare,
    Diagnose,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Flat `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Overrides the config's run name.
    #[arg(long)]
    pub run_name: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Mode {
    /// Flow-matching pretraining only; writes the reference checkpoint.
    Pretrain(CommonArgs),
    /// Full fine-tuning run per seed.
    Train(CommonArgs),
    /// Runs every (G, K) pair of the config's `sweep` over all seeds.
    Compare(CommonArgs),
    /// Re-derives summary statistics from a stored metrics CSV.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        metrics: PathBuf,
    },
}

/// Resolved invocation: what to run, where, and for which seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub run_name: String,
    pub mode: ModeName,
    pub config_path: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl CliConfig {
    pub fn resolve(mode: ModeName, args: &CommonArgs, cfg: &RunConfig) -> Result<Self> {
        let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds.clone() };
        if mode != ModeName::Diagnose && mode != ModeName::Pretrain && args.config.is_none() {
            return Err(Error::invalid("--config is required for this subcommand"));
        }
        fs::create_dir_all(&args.out).map_err(|e| Error::file(&args.out, e))?;
        Ok(Self {
            run_name: args.run_name.clone().unwrap_or_else(|| cfg.run_name.clone()),
            mode,
            config_path: args.config.clone(),
            seeds,
            out_dir: args.out.clone(),
        })
    }
}

fn load(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &args.run_name {
        cfg.run_name = name.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<()> {
    let log = LogLevel::from_env()?;
    match cli.mode {
        Mode::Pretrain(args) => {
            let cfg = load(&args)?;
            let cc = CliConfig::resolve(ModeName::Pretrain, &args, &cfg)?;
            cmd_pretrain(&cfg, &cc, log)
        }
        Mode::Train(args) => {
            let cfg = load(&args)?;
            let cc = CliConfig::resolve(ModeName::Train, &args, &cfg)?;
            cmd_train(&cfg, &cc, log)
        }
        Mode::Compare(args) => {
            let cfg = load(&args)?;
            let cc = CliConfig::resolve(ModeName::Compare, &args, &cfg)?;
            let rows = cmd_compare(&cfg, &cfg.sweep, &cc.seeds, Some(&cc.out_dir))?;
            if log >= LogLevel::Info {
                print!("{}", format_ranking(&rows));
            }
            Ok(())
        }
        Mode::Diagnose { common, metrics } => {
            let cfg = load(&common)?;
            let cc = CliConfig::resolve(ModeName::Diagnose, &common, &cfg)?;
            let report = cmd_diagnose(&metrics, &cfg)?;
            let stem = metrics.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
            let path = cc.out_dir.join(format!("diagnose_{stem}.txt"));
            fs::write(&path, &report).map_err(|e| Error::file(&path, e))?;
            if log >= LogLevel::Info {
                print!("{report}");
            }
            Ok(())
        }
    }
}

fn cmd_pretrain(cfg: &RunConfig, cc: &CliConfig, log: LogLevel) -> Result<()> {
    for &seed in &cc.seeds {
        let cfg = RunConfig { seed, run_name: cc.run_name.clone(), ..cfg.clone() };
        let world = World::build(&cfg)?;
        let pre = pretrain_flow(&world, &cfg)?;
        let stem = format!("{}_{}", cfg.run_name, seed);
        pre.field.save_checkpoint(&cc.out_dir.join(format!("reference_{stem}.ckpt")))?;
        let mut curve = String::from("step,loss\n");
        for (i, l) in pre.loss_curve.iter().enumerate() {
            let _ = writeln!(curve, "{i},{l:.8e}");
        }
        let path = cc.out_dir.join(format!("pretrain_loss_{stem}.csv"));
        fs::write(&path, curve).map_err(|e| Error::file(&path, e))?;
        if log >= LogLevel::Info {
            let acc = plain_prompt_accuracy(&pre.field, &world, &cfg)?;
            println!(
                "seed={seed} heldout_initial={:.6} heldout_final={:.6} plain_accuracy={acc:.4}",
                pre.heldout_initial, pre.heldout_final
            );
        }
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, cc: &CliConfig, log: LogLevel) -> Result<()> {
    for &seed in &cc.seeds {
        let cfg = RunConfig { seed, run_name: cc.run_name.clone(), ..cfg.clone() };
        let mut trainer = Trainer::from_config(cfg)?;
        trainer.log = log;
        let out = trainer.run_to_dir(&cc.out_dir)?;
        if log >= LogLevel::Info {
            println!("seed={seed} final_reward={:.6} final_mode_coverage={:.4}", out.eval.mean_reward, out.eval.mode_coverage);
        }
    }
    Ok(())
}

/// Checks that every pair is usable and that all share one budget `N = G*K`.
pub fn validate_sweep(sweep: &[(usize, usize)]) -> Result<usize> {
    let &(g0, k0) = sweep
        .first()
        .ok_or_else(|| Error::config(0, "sweep", "sweep is empty"))?;
    let n = g0 * k0;
    for &(g, k) in sweep {
        if g == 0 || k == 0 || g * k < 2 {
            return Err(Error::config(0, "sweep", format!("pair {g}x{k} needs G, K >= 1 and G*K >= 2")));
        }
        if g * k != n {
            return Err(Error::config(0, "sweep", format!("pair {g}x{k} has budget {} but the sweep budget is {n}", g * k)));
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub g: usize,
    pub k: usize,
    pub seed: u64,
    pub final_reward: f64,
    pub final_zero_std_ratio: f64,
    pub final_mode_coverage: f64,
    pub rows: Vec<MetricsRow>,
}

pub const COMPARE_HEADER: &str = "G,K,seed,final_reward,final_zero_std_ratio,final_mode_coverage";

pub fn format_compare_csv(rows: &[CompareRow]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.8e},{:.8e},{:.8e}",
            r.g, r.k, r.seed, r.final_reward, r.final_zero_std_ratio, r.final_mode_coverage
        );
    }
    s
}

/// Configurations sorted by mean final reward over seeds, best first.
pub fn ranking(rows: &[CompareRow]) -> Vec<((usize, usize), f64)> {
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.g, r.k)) {
            keys.push((r.g, r.k));
        }
    }
    let mut out: Vec<((usize, usize), f64)> = keys
        .into_iter()
        .map(|key| {
            let rs: Vec<f64> = rows.iter().filter(|r| (r.g, r.k) == key).map(|r| r.final_reward).collect();
            (key, rs.iter().sum::<f64>() / rs.len() as f64)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

pub fn format_ranking(rows: &[CompareRow]) -> String {
    let mut s = String::new();
    for (rank, ((g, k), mean)) in ranking(rows).into_iter().enumerate() {
        let _ = writeln!(s, "#{} G={g} K={k} mean_final_reward={mean:.6}", rank + 1);
    }
    s
}

/// Trains every `(G, K)` pair for every seed. Pretraining is shared per
/// seed; runs execute in parallel and are returned in (pair, seed) order.
/// With `out` set, per-run metrics and the comparison CSV are written.
pub fn cmd_compare(base: &RunConfig, sweep: &[(usize, usize)], seeds: &[u64], out: Option<&Path>) -> Result<Vec<CompareRow>> {
    validate_sweep(sweep)?;
    if seeds.is_empty() {
        return Err(Error::invalid("seed list is empty"));
    }
    let refs: Vec<(World, VelocityField)> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, ..base.clone() };
            let world = World::build(&cfg)?;
            let pre = pretrain_flow(&world, &cfg)?;
            Ok((world, pre.field))
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize, usize)> = sweep
        .iter()
        .flat_map(|&(g, k)| (0..seeds.len()).map(move |s| (g, k, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(g, k, s)| {
            let run_name = format!("{}_G{g}K{k}", base.run_name);
            let cfg = RunConfig { g, k, seed: seeds[s], run_name, ..base.clone() };
            let (world, reference) = &refs[s];
            let mut trainer = Trainer::new(cfg.clone(), world.clone(), reference.clone())?;
            let outcome = match out {
                Some(dir) => trainer.run_to_dir(dir)?,
                None => trainer.run()?,
            };
            let last = outcome.rows.last();
            Ok(CompareRow {
                g,
                k,
                seed: seeds[s],
                final_reward: outcome.eval.mean_reward,
                final_zero_std_ratio: last.map_or(0.0, |r| r.zero_std_ratio),
                final_mode_coverage: last.map_or(0.0, |r| r.mode_coverage),
                rows: outcome.rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(dir) = out {
        let path = dir.join(format!("compare_{}.csv", base.run_name));
        fs::write(&path, format_compare_csv(&rows)).map_err(|e| Error::file(&path, e))?;
    }
    Ok(rows)
}

/// Summary of a stored metrics file. Smoothed std is recomputed from the
/// raw per-iteration std with the config's alpha and compared to the
/// stored column.
pub fn cmd_diagnose(metrics: &Path, cfg: &RunConfig) -> Result<String> {
    let rows = diagnostics::read_csv(metrics)?;
    let mut s = String::new();
    let _ = writeln!(s, "file={}", metrics.display());
    let _ = writeln!(s, "iterations={}", rows.len());
    if rows.is_empty() {
        return Ok(s);
    }
    let std: Vec<f64> = rows.iter().map(|r| r.reward_std).collect();
    let smoothed = diagnostics::smooth(&std, cfg.smooth_alpha);
    let drift = smoothed
        .iter()
        .zip(&rows)
        .map(|(a, r)| (a - r.smoothed_std).abs())
        .fold(0.0, f64::max);
    let last = rows.last().unwrap();
    let first_collapse = rows.iter().find(|r| r.zero_std_ratio >= 0.8).map(|r| r.iteration);
    let _ = writeln!(s, "final_reward_mean={:.6}", last.reward_mean);
    let _ = writeln!(s, "final_zero_std_ratio={:.6}", last.zero_std_ratio);
    let _ = writeln!(s, "max_zero_std_ratio={:.6}", rows.iter().map(|r| r.zero_std_ratio).fold(0.0, f64::max));
    match first_collapse {
        Some(i) => {
            let _ = writeln!(s, "first_iteration_zero_std_ge_0.8={i}");
        }
        None => {
            let _ = writeln!(s, "first_iteration_zero_std_ge_0.8=none");
        }
    }
    let _ = writeln!(s, "tail_log_mean_smoothed_std={:.6}", diagnostics::tail_log_mean(&smoothed, 0.2, 1e-8));
    let _ = writeln!(s, "mean_mode_coverage={:.6}", rows.iter().map(|r| r.mode_coverage).sum::<f64>() / rows.len() as f64);
    let _ = writeln!(s, "smoothed_std_max_abs_drift={drift:.3e}");
    Ok(s)
}

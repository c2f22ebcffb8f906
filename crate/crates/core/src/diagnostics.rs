//! Variance-collapse and diversity instrumentation, and the metrics CSV.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rewardlab::TaskSpec;

pub const CSV_HEADER: &str =
    "iteration,reward_mean,reward_std,zero_std_ratio,smoothed_std,dispersion,mode_coverage,l_emb_final,wallclock_s";

pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub zero_std_ratio: f64,
    pub smoothed_std: f64,
    pub dispersion: f64,
    pub mode_coverage: f64,
    pub l_emb_final: f64,
    pub wallclock_s: f64,
}

/// Fraction of `true` flags.
pub fn zero_std_ratio(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::invalid("zero-std window is empty"));
    }
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Trailing window of per-group zero-std flags.
#[derive(Debug, Clone)]
pub struct ZeroStdWindow {
    width: usize,
    flags: VecDeque<bool>,
}

impl ZeroStdWindow {
    pub fn new(width: usize) -> Self {
        Self { width: width.max(1), flags: VecDeque::with_capacity(width.max(1)) }
    }

    pub fn push(&mut self, flag: bool) {
        if self.flags.len() == self.width {
            self.flags.pop_front();
        }
        self.flags.push_back(flag);
    }

    pub fn ratio(&self) -> Result<f64> {
        let v: Vec<bool> = self.flags.iter().copied().collect();
        zero_std_ratio(&v)
    }
}

/// Exponential moving average: `s_0 = x_0`, `s_i = alpha x_i + (1 - alpha) s_{i-1}`.
pub fn smooth(series: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut s = match series.first() {
        Some(&x) => x,
        None => return out,
    };
    out.push(s);
    for &x in &series[1..] {
        s = alpha * x + (1.0 - alpha) * s;
        out.push(s);
    }
    out
}

/// Mean pairwise Euclidean distance.
pub fn dispersion(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("dispersion needs at least 2 samples"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += samples[i]
                .iter()
                .zip(&samples[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Distinct nearest modes among `samples`, as a fraction of all modes.
pub fn mode_coverage(samples: &[Vec<f64>], task: &TaskSpec) -> f64 {
    let hit: BTreeSet<usize> = samples.iter().map(|x| task.nearest_mode(x)).collect();
    hit.len() as f64 / task.modes() as f64
}

fn fmt(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn format_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let cols = [
            r.iteration.to_string(),
            fmt(r.reward_mean),
            fmt(r.reward_std),
            fmt(r.zero_std_ratio),
            fmt(r.smoothed_std),
            fmt(r.dispersion),
            fmt(r.mode_coverage),
            fmt(r.l_emb_final),
            fmt(r.wallclock_s),
        ];
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}

pub fn export_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    fs::write(path, format_csv(rows)).map_err(|e| Error::file(path, e))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::invalid("metrics CSV header does not match schema")),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(Error::invalid(format!("metrics CSV line {} has {} columns", n + 2, cols.len())));
        }
        let f = |i: usize| -> Result<f64> {
            cols[i]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("metrics CSV line {}: bad number `{}`", n + 2, cols[i])))
        };
        rows.push(MetricsRow {
            iteration: cols[0]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("metrics CSV line {}: bad iteration", n + 2)))?,
            reward_mean: f(1)?,
            reward_std: f(2)?,
            zero_std_ratio: f(3)?,
            smoothed_std: f(4)?,
            dispersion: f(5)?,
            mode_coverage: f(6)?,
            l_emb_final: f(7)?,
            wallclock_s: f(8)?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_csv(&text)
}

/// `metrics_<runname>_<seed>.csv`
pub fn metrics_file_name(run: &str, seed: u64) -> String {
    format!("metrics_{run}_{seed}.csv")
}

/// Mean of `ln(max(x, floor))` over the trailing `fraction` of the series.
pub fn tail_log_mean(series: &[f64], fraction: f64, floor: f64) -> f64 {
    if series.is_empty() {
        return f64::NEG_INFINITY;
    }
    let take = ((series.len() as f64 * fraction).ceil() as usize).clamp(1, series.len());
    let tail = &series[series.len() - take..];
    tail.iter().map(|x| x.max(floor).ln()).sum::<f64>() / take as f64
}

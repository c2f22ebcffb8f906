//! Embedding-perturbed exploration: learnable additive perturbations on the
//! content-token embeddings of a prompt, tuned to spread the pooled
//! embeddings apart while holding them near a target cosine to the anchor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netdiff::{pool, pool_backward, FrozenEncoder};
use crate::optim::{l2_norm, Adam};
use crate::rng::RngStream;
use crate::schedule::ConditionContext;

pub const SOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const SPECIAL_IDS: [u32; 3] = [SOS, EOS, PAD];

const NORM_FLOOR: f64 = 1e-12;

/// Static (non-contextual) token embedding lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn lookup(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        tokens
            .iter()
            .map(|&t| {
                self.rows
                    .get(t as usize)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("token id {t} outside vocabulary")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub tokens: Vec<u32>,
    pub embeddings: Vec<Vec<f64>>,
    pub index_set: Vec<usize>,
}

impl PromptSpec {
    pub fn new(tokens: Vec<u32>, table: &EmbeddingTable) -> Result<Self> {
        let index_set = build_index_set(&tokens, &SPECIAL_IDS)?;
        let embeddings = table.lookup(&tokens)?;
        Ok(Self { tokens, embeddings, index_set })
    }

    pub fn content_len(&self) -> usize {
        self.index_set.len()
    }

    pub fn token_dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }
}

/// Positions holding content tokens, in order.
pub fn build_index_set(tokens: &[u32], special_ids: &[u32]) -> Result<Vec<usize>> {
    if tokens.len() < 3 {
        return Err(Error::invalid(format!("prompt needs at least 3 tokens, got {}", tokens.len())));
    }
    let set: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !special_ids.contains(t) && **t != PAD)
        .map(|(i, _)| i)
        .collect();
    if set.is_empty() {
        return Err(Error::NoContent);
    }
    Ok(set)
}

/// The `K - 1` perturbation tensors (each `L x d`) for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    deltas: Vec<Vec<Vec<f64>>>,
    pub sigma_init: f64,
    pub max_norm: f64,
    frozen: bool,
}

impl PerturbationSet {
    pub fn deltas(&self) -> &[Vec<Vec<f64>>] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn deltas_mut(&mut self) -> Result<&mut [Vec<Vec<f64>>]> {
        if self.frozen {
            return Err(Error::Precondition("perturbation set is frozen".into()));
        }
        Ok(&mut self.deltas)
    }

    /// Largest row norm over all tensors.
    pub fn max_row_norm(&self) -> f64 {
        self.deltas
            .iter()
            .flatten()
            .map(|r| l2_norm(r))
            .fold(0.0, f64::max)
    }

    fn clip_rows(&mut self) {
        let max = self.max_norm;
        for row in self.deltas.iter_mut().flatten() {
            let n = l2_norm(row);
            if n > max {
                let s = max / n;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// `K - 1` Gaussian tensors with entries `N(0, sigma_init^2)`.
pub fn init_perturbations(
    k: usize,
    l: usize,
    d: usize,
    sigma_init: f64,
    rng: &mut RngStream,
) -> Result<PerturbationSet> {
    if k < 2 {
        return Err(Error::invalid(format!("need K >= 2 to perturb, got {k}")));
    }
    if !(sigma_init > 0.0) {
        return Err(Error::invalid(format!("sigma_init must be positive, got {sigma_init}")));
    }
    let deltas = (0..k - 1)
        .map(|_| {
            (0..l)
                .map(|_| rng.normal_vec(d).into_iter().map(|v| sigma_init * v).collect())
                .collect()
        })
        .collect();
    Ok(PerturbationSet {
        deltas,
        sigma_init,
        max_norm: f64::INFINITY,
        frozen: false,
    })
}

/// Add `delta` row `j` onto embedding row `index_set[j]`; other rows are copied.
pub fn apply_perturbation(spec: &PromptSpec, delta: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if delta.len() != spec.index_set.len() {
        return Err(Error::invalid(format!(
            "perturbation has {} rows, prompt has {} content tokens",
            delta.len(),
            spec.index_set.len()
        )));
    }
    let mut out = spec.embeddings.clone();
    for (row, &pos) in delta.iter().zip(&spec.index_set) {
        if row.len() != out[pos].len() {
            return Err(Error::invalid("perturbation row width differs from embedding width"));
        }
        for (e, d) in out[pos].iter_mut().zip(row) {
            *e += d;
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nonzero(v: &[f64]) -> Result<()> {
    if l2_norm(v) == 0.0 {
        return Err(Error::invalid("zero-norm embedding in cosine"));
    }
    Ok(())
}

/// Cosine similarity with norms clamped below by 1e-12.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a).max(NORM_FLOOR);
    let nb = l2_norm(b).max(NORM_FLOOR);
    dot(a, b) / (na * nb)
}

/// `d cos(a, b) / d a`.
fn cosine_grad_a(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = l2_norm(a).max(NORM_FLOOR);
    let nb = l2_norm(b).max(NORM_FLOOR);
    let c = dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - c * ai / (na * na))
        .collect()
}

/// Mean cosine over ordered pairs `i != j`. Zero when fewer than two vectors.
pub fn diversity_loss(embeddings: &[Vec<f64>]) -> Result<f64> {
    Ok(diversity_loss_grad(embeddings)?.0)
}

pub fn diversity_loss_grad(embeddings: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    for e in embeddings {
        nonzero(e)?;
    }
    let k = embeddings.len();
    let mut grads = vec![vec![0.0; embeddings.first().map_or(0, Vec::len)]; k];
    if k < 2 {
        return Ok((0.0, grads));
    }
    let norm = 1.0 / (k * (k - 1)) as f64;
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            total += cosine(&embeddings[i], &embeddings[j]);
            // cos is symmetric, so the (i, j) and (j, i) terms each add the
            // same gradient to slot i.
            for (g, d) in grads[i].iter_mut().zip(cosine_grad_a(&embeddings[i], &embeddings[j])) {
                *g += 2.0 * norm * d;
            }
        }
    }
    Ok((norm * total, grads))
}

/// `sum_k max(0, |cos(e_k, anchor) - mu| - eps)`.
pub fn anchor_loss(embeddings: &[Vec<f64>], anchor: &[f64], mu: f64, eps: f64) -> Result<f64> {
    Ok(anchor_loss_grad(embeddings, anchor, mu, eps)?.0)
}

pub fn anchor_loss_grad(
    embeddings: &[Vec<f64>],
    anchor: &[f64],
    mu: f64,
    eps: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if eps < 0.0 {
        return Err(Error::invalid(format!("anchor margin must be >= 0, got {eps}")));
    }
    nonzero(anchor)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        nonzero(e)?;
        let dev = cosine(e, anchor) - mu;
        let excess = dev.abs() - eps;
        if excess > 0.0 {
            total += excess;
            let sign = dev.signum();
            grads.push(cosine_grad_a(e, anchor).into_iter().map(|g| sign * g).collect());
        } else {
            grads.push(vec![0.0; e.len()]);
        }
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedOptConfig {
    pub steps: usize,
    pub lr: f64,
    pub sigma_init: f64,
    pub max_norm: f64,
    pub lambda_div: f64,
    pub mu: f64,
    pub eps: f64,
}

impl Default for EmbedOptConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            sigma_init: 1e-4,
            max_norm: 0.05,
            lambda_div: 50.0,
            mu: 0.80,
            eps: 0.01,
        }
    }
}

/// Pooled global embedding of a (possibly perturbed) embedding sequence.
pub fn pooled_embedding(enc: &FrozenEncoder, embeddings: &[Vec<f64>], index_set: &[usize]) -> Result<Vec<f64>> {
    pool(&enc.forward_cached(embeddings)?.features, index_set)
}

pub fn anchor_embedding(spec: &PromptSpec, enc: &FrozenEncoder) -> Result<Vec<f64>> {
    pooled_embedding(enc, &spec.embeddings, &spec.index_set)
}

pub fn variant_embeddings(spec: &PromptSpec, enc: &FrozenEncoder, deltas: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    deltas
        .iter()
        .map(|d| pooled_embedding(enc, &apply_perturbation(spec, d)?, &spec.index_set))
        .collect()
}

/// Combined objective `lambda_div * L_div + L_anc` and its gradient with
/// respect to every perturbation tensor.
pub fn embedding_loss_grad(
    spec: &PromptSpec,
    enc: &FrozenEncoder,
    anchor: &[f64],
    deltas: &[Vec<Vec<f64>>],
    cfg: &EmbedOptConfig,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let mut caches = Vec::with_capacity(deltas.len());
    let mut pooled = Vec::with_capacity(deltas.len());
    for d in deltas {
        let cache = enc.forward_cached(&apply_perturbation(spec, d)?)?;
        pooled.push(pool(&cache.features, &spec.index_set)?);
        caches.push(cache);
    }
    let (div, ddiv) = diversity_loss_grad(&pooled)?;
    let (anc, danc) = anchor_loss_grad(&pooled, anchor, cfg.mu, cfg.eps)?;
    let loss = cfg.lambda_div * div + anc;
    let rows = spec.embeddings.len();
    let mut grads = Vec::with_capacity(deltas.len());
    for (k, cache) in caches.iter().enumerate() {
        let de: Vec<f64> = ddiv[k]
            .iter()
            .zip(&danc[k])
            .map(|(a, b)| cfg.lambda_div * a + b)
            .collect();
        let dfeat = pool_backward(&de, &spec.index_set, rows);
        let demb = enc.backward_input(cache, &dfeat);
        grads.push(spec.index_set.iter().map(|&pos| demb[pos].clone()).collect());
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub set: PerturbationSet,
    /// Objective before each step and after the last one (`steps + 1` values).
    pub loss_trace: Vec<f64>,
    pub anchor: Vec<f64>,
    pub variants: Vec<Vec<f64>>,
    pub initial_mean_pairwise_cos: f64,
    /// Largest row norm seen after any step.
    pub max_row_norm_seen: f64,
}

impl EmbedOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().unwrap_or(&0.0)
    }

    pub fn anchor_cosines(&self) -> Vec<f64> {
        self.variants.iter().map(|v| cosine(v, &self.anchor)).collect()
    }

    pub fn mean_pairwise_cos(&self) -> f64 {
        diversity_loss(&self.variants).unwrap_or(0.0)
    }

    pub fn conditions(&self) -> Vec<ConditionContext> {
        self.variants
            .iter()
            .enumerate()
            .map(|(i, v)| ConditionContext::variant(i + 1, v.clone()))
            .collect()
    }

    /// Cosine matrix over `[anchor, variants...]`.
    pub fn cosine_matrix(&self) -> Vec<Vec<f64>> {
        let all: Vec<&Vec<f64>> = std::iter::once(&self.anchor).chain(&self.variants).collect();
        all.iter()
            .map(|a| all.iter().map(|b| cosine(a, b)).collect())
            .collect()
    }

    /// Writes `<stem>_deltas.csv` (variant,row,col,value) and
    /// `<stem>_cosine.csv` (i,j,cosine; index 0 is the anchor).
    pub fn dump_csv(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut s = String::from("variant,row,col,value\n");
        for (k, delta) in self.set.deltas().iter().enumerate() {
            for (r, row) in delta.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    let _ = writeln!(s, "{},{r},{c},{v:.9e}", k + 1);
                }
            }
        }
        let p = dir.join(format!("{stem}_deltas.csv"));
        fs::write(&p, s).map_err(|e| Error::file(&p, e))?;
        let mut s = String::from("i,j,cosine\n");
        for (i, row) in self.cosine_matrix().iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                let _ = writeln!(s, "{i},{j},{c:.9}");
            }
        }
        let p = dir.join(format!("{stem}_cosine.csv"));
        fs::write(&p, s).map_err(|e| Error::file(&p, e))
    }
}

/// Initialize `K - 1` perturbations and run adaptive-moment descent on the
/// combined objective, clipping every row to `max_norm` after each step.
/// The returned set is frozen.
pub fn optimize_embeddings(
    spec: &PromptSpec,
    enc: &FrozenEncoder,
    k: usize,
    cfg: &EmbedOptConfig,
    rng: &mut RngStream,
) -> Result<EmbedOutcome> {
    if !(cfg.max_norm > 0.0) {
        return Err(Error::invalid("max_norm must be positive"));
    }
    let (l, d) = (spec.content_len(), spec.token_dim());
    let mut set = init_perturbations(k, l, d, cfg.sigma_init, rng)?;
    set.max_norm = cfg.max_norm;
    set.clip_rows();
    let anchor = anchor_embedding(spec, enc)?;
    let initial_mean_pairwise_cos = diversity_loss(&variant_embeddings(spec, enc, set.deltas())?)?;

    let n = (k - 1) * l * d;
    let mut opt = Adam::new(n, cfg.lr);
    let mut flat = vec![0.0; n];
    let mut flat_grad = vec![0.0; n];
    let mut loss_trace = Vec::with_capacity(cfg.steps + 1);
    let mut max_row_norm_seen = set.max_row_norm();

    for step in 0..=cfg.steps {
        let (loss, grads) = embedding_loss_grad(spec, enc, &anchor, set.deltas(), cfg)?;
        if !loss.is_finite() {
            return Err(Error::numeric("optimize_embeddings", step, "embedding objective is not finite"));
        }
        loss_trace.push(loss);
        if step == cfg.steps {
            break;
        }
        for (dst, src) in flat.iter_mut().zip(set.deltas().iter().flatten().flatten()) {
            *dst = *src;
        }
        for (dst, src) in flat_grad.iter_mut().zip(grads.iter().flatten().flatten()) {
            *dst = *src;
        }
        opt.step(&mut flat, &flat_grad);
        for (dst, src) in set.deltas_mut()?.iter_mut().flatten().flatten().zip(&flat) {
            *dst = *src;
        }
        set.clip_rows();
        max_row_norm_seen = max_row_norm_seen.max(set.max_row_norm());
    }

    let variants = variant_embeddings(spec, enc, set.deltas())?;
    set.freeze();
    Ok(EmbedOutcome {
        set,
        loss_trace,
        anchor,
        variants,
        initial_mean_pairwise_cos,
        max_row_norm_seen,
    })
}

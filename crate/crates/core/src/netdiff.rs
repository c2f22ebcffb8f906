//! Differentiable velocity field, frozen toy text encoder, and pooling.
//!
//! Gradients are computed by hand-written reverse passes; every loss in the
//! crate builds on `VelocityField::forward_cached` / `backward`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{check_same_len, Error, Result};
use crate::flowcore::{SamplePoint, VelocityModel};
use crate::rng::RngStream;
use crate::schedule::ConditionContext;

pub const CHECKPOINT_MAGIC: &[u8] = b"E2PO-CKPT-v1\n";

#[inline]
/// Dot product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal features of `t` at frequencies `pi * 2^i`.
pub fn time_features(t: f64, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count / 2 {
        let w = std::f64::consts::PI * (1u64 << i) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    if count % 2 == 1 {
        out.push(t);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

impl Dense {
    fn forward(&self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &params[self.w_off..self.w_off + self.fan_in * self.fan_out];
        let b = &params[self.b_off..self.b_off + self.fan_out];
        for (o, row) in w.chunks_exact(self.fan_in).enumerate() {
            out.push(b[o] + dot(row, x));
        }
    }
}

/// Architecture of a [`VelocityField`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldShape {
    pub data_dim: usize,
    pub time_features: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
}

impl FieldShape {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_features + self.cond_dim
    }
}

/// MLP `(x_t, time features, pooled condition) -> velocity` with SiLU
/// hidden activations and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    shape: FieldShape,
    layers: Vec<Dense>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl VelocityField {
    /// Hidden layers uniform in `±1/sqrt(fan_in)`, output layer zero.
    pub fn new(shape: FieldShape, rng: &mut RngStream) -> Self {
        let mut dims = vec![shape.input_dim()];
        dims.extend(&shape.hidden);
        dims.push(shape.data_dim);
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let w_off = offset;
            let b_off = w_off + fan_in * fan_out;
            offset = b_off + fan_out;
            layers.push(Dense { fan_in, fan_out, w_off, b_off });
        }
        let mut params = vec![0.0; offset];
        let last = layers.len() - 1;
        for layer in &layers[..last] {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for p in &mut params[layer.w_off..layer.b_off + layer.fan_out] {
                *p = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        Self { shape, layers, params }
    }

    pub fn shape(&self) -> &FieldShape {
        &self.shape
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_same_len("set_params", params.len(), self.params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn check_inputs(&self, xt: &[f64], t: f64, cond: &[f64]) -> Result<()> {
        check_same_len("velocity_forward state", xt.len(), self.shape.data_dim)?;
        check_same_len("velocity_forward condition", cond.len(), self.shape.cond_dim)?;
        if !t.is_finite() || xt.iter().chain(cond).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite input to velocity field"));
        }
        Ok(())
    }

    pub fn forward_cached(&self, xt: &[f64], t: f64, cond: &[f64]) -> Result<ForwardCache> {
        self.check_inputs(xt, t, cond)?;
        let mut x = Vec::with_capacity(self.shape.input_dim());
        x.extend_from_slice(xt);
        x.extend(time_features(t, self.shape.time_features));
        x.extend_from_slice(cond);

        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        let mut buf = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            layer.forward(&self.params, &x, &mut buf);
            inputs.push(std::mem::take(&mut x));
            if li + 1 < n {
                x = buf.iter().map(|&z| silu(z)).collect();
                pre.push(std::mem::take(&mut buf));
            } else {
                x = std::mem::take(&mut buf);
            }
        }
        Ok(ForwardCache { inputs, pre, output: x })
    }

    pub fn forward(&self, xt: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(xt, t, cond)?.output)
    }

    /// Accumulate `d(loss)/d(theta)` into `grad` given `d(loss)/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut delta = d_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = self.layers[li];
            let input = &cache.inputs[li];
            for (o, &d) in delta.iter().enumerate() {
                grad[layer.b_off + o] += d;
                if d != 0.0 {
                    let row = &mut grad[layer.w_off + o * layer.fan_in..layer.w_off + (o + 1) * layer.fan_in];
                    for (g, &xi) in row.iter_mut().zip(input) {
                        *g += d * xi;
                    }
                }
            }
            if li == 0 {
                break;
            }
            let w = &self.params[layer.w_off..layer.b_off];
            let mut prev = vec![0.0; layer.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &wi) in prev.iter_mut().zip(&w[o * layer.fan_in..(o + 1) * layer.fan_in]) {
                    *p += d * wi;
                }
            }
            for (p, &z) in prev.iter_mut().zip(&cache.pre[li - 1]) {
                *p *= silu_grad(z);
            }
            delta = prev;
        }
    }

    /// Exponential weighting of parameters: `self <- decay*self + (1-decay)*other`.
    pub fn blend_from(&mut self, other: &VelocityField, decay: f64) -> Result<()> {
        check_same_len("blend_from", self.params.len(), other.params.len())?;
        for (a, &b) in self.params.iter_mut().zip(&other.params) {
            *a = decay * *a + (1.0 - decay) * b;
        }
        Ok(())
    }

    /// FNV-1a over the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        fnv(&self.params)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 * (self.params.len() + 8));
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        let s = &self.shape;
        let mut header = vec![s.data_dim, s.time_features, s.cond_dim, s.hidden.len()];
        header.extend(&s.hidden);
        header.push(self.params.len());
        for h in header {
            bytes.extend_from_slice(&(h as u64).to_le_bytes());
        }
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::file(path, e))?;
        let bad = |msg: &str| Error::file(path, msg);
        if !bytes.starts_with(CHECKPOINT_MAGIC) {
            return Err(bad("missing E2PO-CKPT-v1 header"));
        }
        let mut pos = CHECKPOINT_MAGIC.len();
        let mut next_u64 = || -> Result<usize> {
            let chunk = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated shape manifest"))?;
            pos += 8;
            Ok(u64::from_le_bytes(chunk.try_into().unwrap()) as usize)
        };
        let data_dim = next_u64()?;
        let time_features = next_u64()?;
        let cond_dim = next_u64()?;
        let n_hidden = next_u64()?;
        if n_hidden > 64 {
            return Err(bad("implausible hidden layer count"));
        }
        let hidden = (0..n_hidden).map(|_| next_u64()).collect::<Result<Vec<_>>>()?;
        let count = next_u64()?;
        let shape = FieldShape { data_dim, time_features, cond_dim, hidden };
        let mut field = VelocityField::new(shape, &mut RngStream::from_seed(0));
        if field.params.len() != count {
            return Err(bad("parameter count does not match shape manifest"));
        }
        let body = &bytes[pos..];
        if body.len() != 8 * count {
            return Err(bad("parameter payload has wrong length"));
        }
        for (p, chunk) in field.params.iter_mut().zip(body.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(field)
    }
}

impl VelocityModel for VelocityField {
    fn dim(&self) -> usize {
        self.shape.data_dim
    }

    fn velocity(&self, xt: &[f64], t: f64, cond: &ConditionContext) -> Result<Vec<f64>> {
        velocity_forward(self, xt, t, cond)
    }
}

pub fn velocity_forward(field: &VelocityField, xt: &[f64], t: f64, c: &ConditionContext) -> Result<Vec<f64>> {
    field.forward(xt, t, &c.pooled)
}

/// Evaluate a loss closure that accumulates its own gradient and return
/// `d(loss)/d(theta)`, rejecting non-finite entries.
pub fn grad_params<F>(field: &VelocityField, scalar_loss: F) -> Result<Vec<f64>>
where
    F: FnOnce(&VelocityField, &mut [f64]) -> Result<f64>,
{
    Ok(loss_and_grad(field, scalar_loss)?.1)
}

pub fn loss_and_grad<F>(field: &VelocityField, scalar_loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&VelocityField, &mut [f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; field.num_params()];
    let loss = scalar_loss(field, &mut grad)?;
    if !loss.is_finite() {
        return Err(Error::numeric("grad_params", 0, "loss is not finite"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric("grad_params", i, "gradient entry is not finite"));
    }
    Ok((loss, grad))
}

/// Mean over the batch of `|v_theta(x_t, t, c) - (x1 - x0)|^2`; accumulates
/// its gradient into `grad` when given.
pub fn fm_loss_grad(
    field: &VelocityField,
    batch: &[(SamplePoint, Vec<f64>)],
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty flow-matching batch"));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (point, cond) in batch {
        let cache = field.forward_cached(&point.xt, point.t, cond)?;
        let mut d_out = Vec::with_capacity(point.v.len());
        for (o, v) in cache.output.iter().zip(&point.v) {
            total += (o - v) * (o - v);
            d_out.push(2.0 * inv_n * (o - v));
        }
        if let Some(g) = grad.as_deref_mut() {
            field.backward(&cache, &d_out, g);
        }
    }
    Ok(total * inv_n)
}

fn fnv(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// Row-major `rows x cols` matrix with orthonormal columns (or rows, when
/// `rows < cols`), from Gram-Schmidt on Gaussian draws.
pub(crate) fn semi_orthogonal(rows: usize, cols: usize, rng: &mut RngStream) -> Vec<f64> {
    let (n, m) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = rng.normal_vec(m);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows >= cols { basis[c][r] } else { basis[r][c] };
        }
    }
    out
}

/// Frozen token-wise encoder with one cross-position mixing layer:
///
/// ```text
/// h_s = tanh(W1 e_s + b1)
/// g   = tanh(W2 mean_s(h_s) + b2)
/// f_s = h_s + g
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    token_dim: usize,
    feature_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Intermediates of an encoder pass; needed for input gradients.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    h: Vec<Vec<f64>>,
    g: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl FrozenEncoder {
    /// The token-wise weights are `gain` times a random semi-orthogonal
    /// matrix, so small input perturbations are stretched equally in every
    /// direction before the nonlinearity.
    pub fn new(token_dim: usize, feature_dim: usize, gain: f64, seed: u64) -> Self {
        let mut rng = RngStream::derive(seed, crate::rng::Stream::Task, &[0xE4C]);
        let s2 = 0.5 / (feature_dim as f64).sqrt();
        let w1 = semi_orthogonal(feature_dim, token_dim, &mut rng)
            .into_iter()
            .map(|w| gain * w)
            .collect();
        let b1 = (0..feature_dim).map(|_| 0.1 * s2 * rng.normal()).collect();
        let w2 = (0..feature_dim * feature_dim).map(|_| s2 * rng.normal()).collect();
        let b2 = (0..feature_dim).map(|_| 0.1 * s2 * rng.normal()).collect();
        Self { token_dim, feature_dim, w1, b1, w2, b2 }
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn checksum(&self) -> u64 {
        let mut all = self.w1.clone();
        all.extend(&self.b1);
        all.extend(&self.w2);
        all.extend(&self.b2);
        fnv(&all)
    }

    pub fn forward_cached(&self, embeddings: &[Vec<f64>]) -> Result<EncoderCache> {
        if embeddings.len() < 3 {
            return Err(Error::invalid(format!(
                "encoder needs at least 3 positions, got {}",
                embeddings.len()
            )));
        }
        let (d, f) = (self.token_dim, self.feature_dim);
        let mut h = Vec::with_capacity(embeddings.len());
        for row in embeddings {
            check_same_len("encoder_forward token dim", row.len(), d)?;
            let mut hs = Vec::with_capacity(f);
            for o in 0..f {
                let w = &self.w1[o * d..(o + 1) * d];
                let z = self.b1[o] + dot(w, row);
                hs.push(z.tanh());
            }
            h.push(hs);
        }
        let inv_s = 1.0 / h.len() as f64;
        let mut mean = vec![0.0; f];
        for hs in &h {
            for (m, v) in mean.iter_mut().zip(hs) {
                *m += v * inv_s;
            }
        }
        let g: Vec<f64> = (0..f)
            .map(|o| {
                let w = &self.w2[o * f..(o + 1) * f];
                (self.b2[o] + dot(w, &mean)).tanh()
            })
            .collect();
        let features = h
            .iter()
            .map(|hs| hs.iter().zip(&g).map(|(a, b)| a + b).collect())
            .collect();
        Ok(EncoderCache { h, g, features })
    }

    /// Gradient with respect to the input embeddings given the gradient with
    /// respect to the features. Encoder weights receive nothing.
    pub fn backward_input(&self, cache: &EncoderCache, d_features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (d, f) = (self.token_dim, self.feature_dim);
        let s = cache.h.len();
        let mut dg = vec![0.0; f];
        for df in d_features {
            for (a, b) in dg.iter_mut().zip(df) {
                *a += b;
            }
        }
        let mut dz2 = vec![0.0; f];
        for o in 0..f {
            dz2[o] = dg[o] * (1.0 - cache.g[o] * cache.g[o]);
        }
        let mut dmean = vec![0.0; f];
        for o in 0..f {
            let w = &self.w2[o * f..(o + 1) * f];
            for (m, wi) in dmean.iter_mut().zip(w) {
                *m += dz2[o] * wi;
            }
        }
        let inv_s = 1.0 / s as f64;
        let mut d_emb = Vec::with_capacity(s);
        for (pos, hs) in cache.h.iter().enumerate() {
            let mut dx = vec![0.0; d];
            for o in 0..f {
                let dh = d_features[pos][o] + dmean[o] * inv_s;
                let dz = dh * (1.0 - hs[o] * hs[o]);
                if dz == 0.0 {
                    continue;
                }
                for (x, w) in dx.iter_mut().zip(&self.w1[o * d..(o + 1) * d]) {
                    *x += dz * w;
                }
            }
            d_emb.push(dx);
        }
        d_emb
    }
}

pub fn encoder_forward(enc: &FrozenEncoder, embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(enc.forward_cached(embeddings)?.features)
}

/// Mean of the feature rows listed in `index_set`.
pub fn pool(features: &[Vec<f64>], index_set: &[usize]) -> Result<Vec<f64>> {
    if index_set.is_empty() {
        return Err(Error::invalid("pooling index set is empty"));
    }
    let width = features.first().map_or(0, Vec::len);
    let mut out = vec![0.0; width];
    for &i in index_set {
        let row = features
            .get(i)
            .ok_or_else(|| Error::invalid(format!("pool index {i} out of range ({})", features.len())))?;
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / index_set.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// Scatter a pooled gradient back onto the feature rows.
pub fn pool_backward(d_pooled: &[f64], index_set: &[usize], rows: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; d_pooled.len()]; rows];
    let inv = 1.0 / index_set.len() as f64;
    for &i in index_set {
        for (o, d) in out[i].iter_mut().zip(d_pooled) {
            *o += d * inv;
        }
    }
    out
}

//! Tiny causal transformer language model.
//!
//! Pre-norm blocks with learned positional embeddings, GELU feed-forward and
//! an untied output head. Training runs full sequences with a hand-written
//! backward pass; inference goes through [`LmState`], which keeps a key/value
//! cache and the final-layer hidden state of every position.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{PiernError, Result};
use crate::numerics::ops::{gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, LayerNormCache};
use crate::numerics::{hash_params, Adam, AdamConfig, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub context: usize,
    pub ff_mult: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 128,
            context: 512,
            ff_mult: 4,
        }
    }
}

impl LmConfig {
    /// Smaller profile that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            context: 512,
            ff_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.context == 0 || self.ff_mult == 0 {
            return Err(PiernError::Config("lm dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(PiernError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn ff(&self) -> usize {
        self.d_model * self.ff_mult
    }
}

const TOK: usize = 0;
const POS: usize = 1;
const LAYER0: usize = 2;
const PER_LAYER: usize = 12;
const LN1: usize = 0;
const QKV: usize = 2;
const WO: usize = 4;
const LN2: usize = 6;
const W1: usize = 8;
const W2: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: LmConfig,
    pub vocab_size: usize,
    pub params: Vec<Parameter>,
}

struct LayerCache {
    ln1: LayerNormCache,
    a_in: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<Vec<f64>>,
    o: Vec<f64>,
    ln2: LayerNormCache,
    m_in: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations of a training forward pass.
pub struct TrainCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    hf: Vec<f64>,
}

/// Incremental decoding state for one sequence.
#[derive(Debug, Clone, Default)]
pub struct LmState {
    ids: Vec<u32>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    macs: u64,
}

impl LmState {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Final-layer hidden vectors, one row of width `d_model` per position.
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    /// Hidden vector at the last position.
    pub fn last_hidden(&self) -> &[f64] {
        let d = self.hidden.len() / self.ids.len().max(1);
        &self.hidden[self.hidden.len() - d..]
    }

    /// Next-token logits at the last position.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Multiply-accumulates spent on this sequence so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }
}

/// Row-wise causal softmax of `s` (`rows x cols`), where row `r` may see
/// columns `0..=offset + r`.
fn causal_softmax(s: &mut [f64], rows: usize, cols: usize, offset: usize, scale: f64) {
    for r in 0..rows {
        let row = &mut s[r * cols..(r + 1) * cols];
        let visible = offset + r + 1;
        let mut max = f64::NEG_INFINITY;
        for v in &mut row[..visible] {
            *v *= scale;
            max = max.max(*v);
        }
        let mut sum = 0.0;
        for v in &mut row[..visible] {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut row[..visible] {
            *v /= sum;
        }
        row[visible..].fill(0.0);
    }
}

fn gather(src: &[f64], rows: usize, stride: usize, offset: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&src[r * stride + offset..r * stride + offset + width]);
    }
    out
}

fn scatter(dst: &mut [f64], src: &[f64], rows: usize, stride: usize, offset: usize, width: usize) {
    for r in 0..rows {
        dst[r * stride + offset..r * stride + offset + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: LmConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(PiernError::Empty("vocabulary"));
        }
        let d = config.d_model;
        let f = config.ff();
        let resid = (1.0 / d as f64).sqrt() / (2.0 * config.layers as f64).sqrt();
        let mut params = vec![
            Parameter::randn(&[vocab_size, d], 0.1, rng),
            Parameter::randn(&[config.context, d], 0.02, rng),
        ];
        for _ in 0..config.layers {
            params.push(Parameter::new(crate::numerics::Tensor::full(&[d], 1.0)));
            params.push(Parameter::zeros(&[d]));
            params.push(Parameter::randn(&[d, 3 * d], (1.0 / d as f64).sqrt(), rng));
            params.push(Parameter::zeros(&[3 * d]));
            params.push(Parameter::randn(&[d, d], resid, rng));
            params.push(Parameter::zeros(&[d]));
            params.push(Parameter::new(crate::numerics::Tensor::full(&[d], 1.0)));
            params.push(Parameter::zeros(&[d]));
            params.push(Parameter::randn(&[d, f], (1.0 / d as f64).sqrt(), rng));
            params.push(Parameter::zeros(&[f]));
            params.push(Parameter::randn(&[f, d], (1.0 / f as f64).sqrt() / (2.0 * config.layers as f64).sqrt(), rng));
            params.push(Parameter::zeros(&[d]));
        }
        params.push(Parameter::new(crate::numerics::Tensor::full(&[d], 1.0)));
        params.push(Parameter::zeros(&[d]));
        params.push(Parameter::randn(&[d, vocab_size], (1.0 / d as f64).sqrt(), rng));
        params.push(Parameter::zeros(&[vocab_size]));
        Ok(Self {
            config,
            vocab_size,
            params,
        })
    }

    fn lp(&self, layer: usize, k: usize) -> usize {
        LAYER0 + layer * PER_LAYER + k
    }

    fn fin(&self) -> usize {
        LAYER0 + self.config.layers * PER_LAYER
    }

    fn w(&self, i: usize) -> &[f64] {
        self.params[i].w()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Frozen token embedding table (`vocab x d_model`).
    pub fn token_embeddings(&self) -> &[f64] {
        self.w(TOK)
    }

    pub fn freeze(&mut self) {
        self.params.iter_mut().for_each(Parameter::freeze);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    pub fn hash(&self) -> String {
        hash_params(&self.params)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    fn check_ids(&self, ids: &[u32], start: usize) -> Result<()> {
        if start + ids.len() > self.config.context {
            return Err(PiernError::ContextOverflow {
                len: start + ids.len(),
                max: self.config.context,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(PiernError::Tokenizer(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32], start: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let mut x = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            let t = &self.w(TOK)[id as usize * d..(id as usize + 1) * d];
            let p = &self.w(POS)[(start + r) * d..(start + r + 1) * d];
            for i in 0..d {
                x[r * d + i] = t[i] + p[i];
            }
        }
        x
    }

    /// Full-sequence forward keeping everything needed for [`Self::backward`].
    /// Returns logits for every position (`len x vocab`).
    pub fn forward_train(&self, ids: &[u32]) -> Result<(Vec<f64>, TrainCache)> {
        if ids.is_empty() {
            return Err(PiernError::Empty("lm input"));
        }
        self.check_ids(ids, 0)?;
        let t = ids.len();
        let d = self.config.d_model;
        let f = self.config.ff();
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = self.embed(ids, 0);
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (a_in, ln1) = layer_norm(&x, self.w(self.lp(l, LN1)), self.w(self.lp(l, LN1) + 1), d);
            let qkv = linear(&a_in, self.w(self.lp(l, QKV)), Some(self.w(self.lp(l, QKV) + 1)), t, d, 3 * d);
            let mut o = vec![0.0; t * d];
            let mut probs = Vec::with_capacity(h);
            for hh in 0..h {
                let q = gather(&qkv, t, 3 * d, hh * dh, dh);
                let k = gather(&qkv, t, 3 * d, d + hh * dh, dh);
                let v = gather(&qkv, t, 3 * d, 2 * d + hh * dh, dh);
                let mut s = vec![0.0; t * t];
                gemm(t, dh, t, &q, false, &k, true, 0.0, &mut s);
                causal_softmax(&mut s, t, t, 0, scale);
                let mut oh = vec![0.0; t * dh];
                gemm(t, t, dh, &s, false, &v, false, 0.0, &mut oh);
                scatter(&mut o, &oh, t, d, hh * dh, dh);
                probs.push(s);
            }
            let att = linear(&o, self.w(self.lp(l, WO)), Some(self.w(self.lp(l, WO) + 1)), t, d, d);
            x.iter_mut().zip(&att).for_each(|(a, b)| *a += b);
            let (m_in, ln2) = layer_norm(&x, self.w(self.lp(l, LN2)), self.w(self.lp(l, LN2) + 1), d);
            let u = linear(&m_in, self.w(self.lp(l, W1)), Some(self.w(self.lp(l, W1) + 1)), t, d, f);
            let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
            let out = linear(&g, self.w(self.lp(l, W2)), Some(self.w(self.lp(l, W2) + 1)), t, f, d);
            x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
            layers.push(LayerCache {
                ln1,
                a_in,
                qkv,
                probs,
                o,
                ln2,
                m_in,
                u,
                g,
            });
        }
        let fin = self.fin();
        let (hf, lnf) = layer_norm(&x, self.w(fin), self.w(fin + 1), d);
        let logits = linear(&hf, self.w(fin + 2), Some(self.w(fin + 3)), t, d, self.vocab_size);
        Ok((
            logits,
            TrainCache {
                ids: ids.to_vec(),
                layers,
                lnf,
                hf,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn lin_back(&mut self, wi: usize, x: &[f64], dy: &[f64], rows: usize, fi: usize, fo: usize) -> Vec<f64> {
        let mut dw = std::mem::take(&mut self.params[wi].grad);
        let mut db = std::mem::take(&mut self.params[wi + 1].grad);
        let dx = linear_backward(x, self.params[wi].w(), dy, dw.data_mut(), Some(db.data_mut()), rows, fi, fo, true);
        self.params[wi].grad = dw;
        self.params[wi + 1].grad = db;
        dx.unwrap()
    }

    fn ln_back(&mut self, gi: usize, dy: &[f64], cache: &LayerNormCache) -> Vec<f64> {
        let mut dg = std::mem::take(&mut self.params[gi].grad);
        let mut db = std::mem::take(&mut self.params[gi + 1].grad);
        let d = self.config.d_model;
        let dx = layer_norm_backward(dy, self.params[gi].w(), cache, dg.data_mut(), db.data_mut(), d);
        self.params[gi].grad = dg;
        self.params[gi + 1].grad = db;
        dx
    }

    /// Accumulates parameter gradients for `dlogits` (`len x vocab`).
    pub fn backward(&mut self, cache: &TrainCache, dlogits: &[f64]) {
        let t = cache.ids.len();
        let d = self.config.d_model;
        let f = self.config.ff();
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let fin = self.fin();
        let dhf = self.lin_back(fin + 2, &cache.hf, dlogits, t, d, self.vocab_size);
        let mut dx = self.ln_back(fin, &dhf, &cache.lnf);
        for l in (0..self.config.layers).rev() {
            let c = &cache.layers[l];
            let dg = self.lin_back(self.lp(l, W2), &c.g, &dx, t, f, d);
            let du: Vec<f64> = dg.iter().zip(&c.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            let dm_in = self.lin_back(self.lp(l, W1), &c.m_in, &du, t, d, f);
            let dres = self.ln_back(self.lp(l, LN2), &dm_in, &c.ln2);
            dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
            let d_o = self.lin_back(self.lp(l, WO), &c.o, &dx, t, d, d);
            let mut dqkv = vec![0.0; t * 3 * d];
            for hh in 0..h {
                let q = gather(&c.qkv, t, 3 * d, hh * dh, dh);
                let k = gather(&c.qkv, t, 3 * d, d + hh * dh, dh);
                let v = gather(&c.qkv, t, 3 * d, 2 * d + hh * dh, dh);
                let doh = gather(&d_o, t, d, hh * dh, dh);
                let p = &c.probs[hh];
                let mut dp = vec![0.0; t * t];
                gemm(t, dh, t, &doh, false, &v, true, 0.0, &mut dp);
                let mut dv = vec![0.0; t * dh];
                gemm(t, t, dh, p, true, &doh, false, 0.0, &mut dv);
                for r in 0..t {
                    let row = r * t..(r + 1) * t;
                    let dot: f64 = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        dp[j] = p[j] * (dp[j] - dot) * scale;
                    }
                }
                let mut dq = vec![0.0; t * dh];
                gemm(t, t, dh, &dp, false, &k, false, 0.0, &mut dq);
                let mut dk = vec![0.0; t * dh];
                gemm(t, t, dh, &dp, true, &q, false, 0.0, &mut dk);
                scatter(&mut dqkv, &dq, t, 3 * d, hh * dh, dh);
                scatter(&mut dqkv, &dk, t, 3 * d, d + hh * dh, dh);
                scatter(&mut dqkv, &dv, t, 3 * d, 2 * d + hh * dh, dh);
            }
            let da = self.lin_back(self.lp(l, QKV), &c.a_in, &dqkv, t, d, 3 * d);
            let dres = self.ln_back(self.lp(l, LN1), &da, &c.ln1);
            dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
        }
        for (r, &id) in cache.ids.iter().enumerate() {
            let row = &dx[r * d..(r + 1) * d];
            let tg = &mut self.params[TOK].g()[id as usize * d..(id as usize + 1) * d];
            tg.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            let pg = &mut self.params[POS].g()[r * d..(r + 1) * d];
            pg.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }

    pub fn start(&self) -> LmState {
        LmState {
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            ..LmState::default()
        }
    }

    /// Runs `new_ids` through the model on top of the cached prefix.
    pub fn append(&self, state: &mut LmState, new_ids: &[u32]) -> Result<()> {
        if new_ids.is_empty() {
            return Ok(());
        }
        let t0 = state.ids.len();
        self.check_ids(new_ids, t0)?;
        let n = new_ids.len();
        let total = t0 + n;
        let d = self.config.d_model;
        let f = self.config.ff();
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut macs = 0u64;
        let mut x = self.embed(new_ids, t0);
        for l in 0..self.config.layers {
            let (a_in, _) = layer_norm(&x, self.w(self.lp(l, LN1)), self.w(self.lp(l, LN1) + 1), d);
            let qkv = linear(&a_in, self.w(self.lp(l, QKV)), Some(self.w(self.lp(l, QKV) + 1)), n, d, 3 * d);
            for r in 0..n {
                state.keys[l].extend_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
                state.values[l].extend_from_slice(&qkv[r * 3 * d + 2 * d..(r + 1) * 3 * d]);
            }
            let mut o = vec![0.0; n * d];
            for hh in 0..h {
                let q = gather(&qkv, n, 3 * d, hh * dh, dh);
                let k = gather(&state.keys[l], total, d, hh * dh, dh);
                let v = gather(&state.values[l], total, d, hh * dh, dh);
                let mut s = vec![0.0; n * total];
                gemm(n, dh, total, &q, false, &k, true, 0.0, &mut s);
                causal_softmax(&mut s, n, total, t0, scale);
                let mut oh = vec![0.0; n * dh];
                gemm(n, total, dh, &s, false, &v, false, 0.0, &mut oh);
                scatter(&mut o, &oh, n, d, hh * dh, dh);
            }
            let att = linear(&o, self.w(self.lp(l, WO)), Some(self.w(self.lp(l, WO) + 1)), n, d, d);
            x.iter_mut().zip(&att).for_each(|(a, b)| *a += b);
            let (m_in, _) = layer_norm(&x, self.w(self.lp(l, LN2)), self.w(self.lp(l, LN2) + 1), d);
            let u = linear(&m_in, self.w(self.lp(l, W1)), Some(self.w(self.lp(l, W1) + 1)), n, d, f);
            let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
            let out = linear(&g, self.w(self.lp(l, W2)), Some(self.w(self.lp(l, W2) + 1)), n, f, d);
            x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
            macs += (n * (3 * d * d + d * d + 2 * d * f)) as u64;
            macs += (0..n).map(|r| (2 * (t0 + r + 1) * d) as u64).sum::<u64>();
        }
        let fin = self.fin();
        let (hf, _) = layer_norm(&x, self.w(fin), self.w(fin + 1), d);
        let last = &hf[(n - 1) * d..];
        state.logits = linear(last, self.w(fin + 2), Some(self.w(fin + 3)), 1, d, self.vocab_size);
        macs += (d * self.vocab_size) as u64;
        state.hidden.extend_from_slice(&hf);
        state.ids.extend_from_slice(new_ids);
        state.macs += macs;
        Ok(())
    }

    /// Forward over a whole sequence: per-position hidden states and the
    /// next-token logits at the last position.
    pub fn lm_forward(&self, ids: &[u32]) -> Result<LmState> {
        if ids.is_empty() {
            return Err(PiernError::Empty("lm input"));
        }
        let mut st = self.start();
        self.append(&mut st, ids)?;
        Ok(st)
    }

    pub fn save(&self, stem: &Path, vocab_hash: &str) -> Result<String> {
        let mut meta = BTreeMap::new();
        meta.insert("vocab_hash".to_string(), vocab_hash.to_string());
        meta.insert("vocab_size".to_string(), self.vocab_size.to_string());
        let names: Vec<String> = (0..self.params.len()).map(|i| format!("p{i}")).collect();
        checkpoint::save(stem, "backbone", &self.config, meta, &checkpoint::named(&names, &self.params))
    }

    /// Loads a frozen backbone; returns it with the vocabulary hash it was trained against.
    pub fn load(stem: &Path) -> Result<(Self, String)> {
        let (manifest, params) = checkpoint::load(stem)?;
        manifest.expect_kind("backbone")?;
        let config: LmConfig = manifest.config()?;
        config.validate()?;
        let vocab_size: usize = manifest
            .meta("vocab_size")?
            .parse()
            .map_err(|_| PiernError::Checkpoint("bad vocab_size".into()))?;
        let lm = Self {
            config,
            vocab_size,
            params,
        };
        if lm.params.len() != lm.fin() + 4 {
            return Err(PiernError::Checkpoint(format!("backbone has {} tensors", lm.params.len())));
        }
        Ok((lm, manifest.meta("vocab_hash")?.to_string()))
    }
}

/// Mean next-token cross-entropy of `logits` (`len x vocab`) against
/// `ids[1..]`; returns the summed loss, the token count and `dlogits` scaled
/// by `1 / denom`.
pub fn next_token_loss(logits: &[f64], ids: &[u32], vocab: usize, denom: f64) -> (f64, usize, Vec<f64>) {
    let t = ids.len();
    let mut dl = vec![0.0; logits.len()];
    let mut total = 0.0;
    for r in 0..t.saturating_sub(1) {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let target = ids[r + 1] as usize;
        total += -(row[target] - max - sum.ln());
        for (j, v) in row.iter().enumerate() {
            dl[r * vocab + j] = (v - max).exp() / sum / denom;
        }
        dl[r * vocab + target] -= 1.0 / denom;
    }
    (total, t.saturating_sub(1), dl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Linear decay of the learning rate to this fraction over training.
    pub final_lr_frac: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            clip: 1.0,
            final_lr_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    pub epoch_losses: Vec<f64>,
    pub seconds: f64,
}

impl LmTrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains a fresh backbone on tokenized sequences with next-token cross-entropy.
pub fn train_lm(
    corpus: &[Vec<u32>],
    config: LmConfig,
    vocab_size: usize,
    train: &LmTrainConfig,
    seed: u64,
) -> Result<(Backbone, LmTrainReport)> {
    if corpus.is_empty() {
        return Err(PiernError::Empty("lm corpus"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lm = Backbone::new(config, vocab_size, &mut rng)?;
    for seq in corpus {
        lm.check_ids(seq, 0)?;
    }
    let mut opt = {
        let refs: Vec<&mut Parameter> = lm.params.iter_mut().collect();
        Adam::new(train.adam, &refs)
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let steps_per_epoch = corpus.len().div_ceil(train.batch_size.max(1));
    let total_steps = (steps_per_epoch * train.epochs).max(1);
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(train.batch_size.max(1)) {
            lm.zero_grad();
            let denom: usize = batch.iter().map(|&i| corpus[i].len().saturating_sub(1)).sum();
            if denom == 0 {
                continue;
            }
            for &i in batch {
                let (logits, cache) = lm.forward_train(&corpus[i])?;
                let (loss, n, dl) = next_token_loss(&logits, &corpus[i], vocab_size, denom as f64);
                sum += loss;
                count += n;
                lm.backward(&cache, &dl);
            }
            if train.clip > 0.0 {
                let norm: f64 = lm
                    .params
                    .iter()
                    .flat_map(|p| p.grad.data())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if !norm.is_finite() {
                    return Err(PiernError::Diverged { epoch, loss: norm });
                }
                if norm > train.clip {
                    let s = train.clip / norm;
                    lm.params.iter_mut().for_each(|p| p.g().iter_mut().for_each(|g| *g *= s));
                }
            }
            let frac = step as f64 / total_steps as f64;
            opt.set_lr(train.adam.lr * (1.0 - (1.0 - train.final_lr_frac) * frac));
            let mut refs: Vec<&mut Parameter> = lm.params.iter_mut().collect();
            opt.step(&mut refs)?;
            step += 1;
        }
        let mean = sum / count.max(1) as f64;
        if !mean.is_finite() {
            return Err(PiernError::Diverged { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    lm.freeze();
    Ok((
        lm,
        LmTrainReport {
            epoch_losses,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

/// Greedy argmax (lowest id wins ties) or temperature sampling.
pub fn next_token<R: Rng + ?Sized>(logits: &[f64], mode: DecodeMode, rng: &mut R) -> u32 {
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best as u32
        }
        DecodeMode::Sample { temperature } => {
            let t = temperature.max(1e-8);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|v| ((v - max) / t).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return i as u32;
                }
                u -= wi;
            }
            (w.len() - 1) as u32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_TOLERANCE};

    fn tiny() -> LmConfig {
        LmConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            context: 16,
            ff_mult: 2,
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lm = Backbone::new(tiny(), 7, &mut rng).unwrap();
        let ids = [0u32, 3, 5, 3, 6, 1];
        let mut params = lm.params.clone();
        let report = grad_check(
            |ps| {
                let mut m = lm.clone();
                m.params = ps.to_vec();
                m.zero_grad();
                let (logits, cache) = m.forward_train(&ids)?;
                let (loss, n, dl) = next_token_loss(&logits, &ids, 7, 5.0);
                assert_eq!(n, 5);
                m.backward(&cache, &dl);
                for (p, q) in ps.iter_mut().zip(&m.params) {
                    p.grad = q.grad.clone();
                }
                Ok(loss / 5.0)
            },
            &mut params,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn cached_forward_matches_training_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lm = Backbone::new(tiny(), 9, &mut rng).unwrap();
        let ids = [0u32, 4, 2, 8, 8, 3, 1];
        let (logits, cache) = lm.forward_train(&ids).unwrap();
        let mut st = lm.start();
        lm.append(&mut st, &ids[..3]).unwrap();
        for &id in &ids[3..] {
            lm.append(&mut st, &[id]).unwrap();
        }
        for (a, b) in st.hidden().iter().zip(&cache.hf) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in st.logits().iter().zip(&logits[6 * 9..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causality_and_overflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lm = Backbone::new(tiny(), 9, &mut rng).unwrap();
        let a = lm.lm_forward(&[0, 4, 2, 8, 5]).unwrap();
        let b = lm.lm_forward(&[0, 4, 2, 7, 5]).unwrap();
        assert_eq!(a.hidden()[..3 * 8], b.hidden()[..3 * 8]);
        assert_ne!(a.hidden()[3 * 8..], b.hidden()[3 * 8..]);
        let long = vec![3u32; 17];
        assert!(matches!(lm.lm_forward(&long), Err(PiernError::ContextOverflow { len: 17, max: 16 })));
        let again = lm.lm_forward(&[0, 4, 2, 8, 5]).unwrap();
        assert_eq!(a.logits(), again.logits());
    }

    #[test]
    fn greedy_and_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(next_token(&[1.0, 3.0, 2.0], DecodeMode::Greedy, &mut rng), 1);
        assert_eq!(next_token(&[2.0, 2.0], DecodeMode::Greedy, &mut rng), 0);
        let logits = [0.0, 1.0, -0.5];
        let p = crate::numerics::softmax(&logits).unwrap();
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[next_token(&logits, DecodeMode::Sample { temperature: 1.0 }, &mut rng) as usize] += 1;
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / 10_000.0;
            let sd = (p[i] * (1.0 - p[i]) / 10_000.0).sqrt();
            assert!((freq - p[i]).abs() < 4.0 * sd, "{i}: {freq} vs {}", p[i]);
        }
    }

    #[test]
    fn memorizes_one_sentence() {
        let ids: Vec<u32> = vec![0, 5, 6, 7, 8, 5, 9, 1];
        let config = LmConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            context: 16,
            ff_mult: 2,
        };
        let train = LmTrainConfig {
            epochs: 200,
            batch_size: 1,
            ..LmTrainConfig::default()
        };
        let (lm, report) = train_lm(&[ids.clone()], config, 10, &train, 1).unwrap();
        assert!(report.final_loss() < 0.01, "{}", report.final_loss());
        let (_, again) = train_lm(&[ids], config, 10, &train, 1).unwrap();
        assert_eq!(report.final_loss().to_bits(), again.final_loss().to_bits());
        assert!(lm.is_frozen());
    }
}

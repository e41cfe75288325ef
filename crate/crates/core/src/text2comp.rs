//! Stage 2: the text-to-computation aligner.
//!
//! One aligner per expert. Each of its K slots is a learned query that
//! cross-attends over the positions of the current sequence that close a
//! number (a digit token not followed by another digit); the attended
//! value passes through a per-slot linear head and lands in the expert's
//! normalized input space.
//!
//! Position `t` contributes a key built from the frozen backbone hidden state
//! plus a learned table lookup over the token window `t-9 ..= t+1`, and a
//! per-slot value `(A_k w_t + a_k) * (B_k w_t + b_k)` over the same window.
//! The gated value can represent a signed decimal read off its digits exactly.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint;
use crate::datagen::NormStats;
use crate::error::{PiernError, Result};
use nalgebra::{DMatrix, DVector};

use crate::numerics::ops::{dot, gemm, matmul, norm, softmax_in_place};
use crate::numerics::{cosine_sim, hash_params, Adam, AdamConfig, Parameter, Tensor};
use crate::tokenizer::{NumberTokens, PAD};

/// Extraction loss `(1/N) sum_i ||xhat_i - x_i||^2`.
pub fn text2comp_mse(xhat: &[Vec<f64>], x: &[Vec<f64>]) -> Result<f64> {
    check_batch(xhat, x)?;
    let n = xhat.len() as f64;
    Ok(xhat
        .iter()
        .zip(x)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        .sum::<f64>()
        / n)
}

/// Gradient of [`text2comp_mse`] with respect to each prediction.
pub fn text2comp_mse_grad(xhat: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = xhat.len() as f64;
    xhat.iter()
        .zip(x)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| 2.0 * (p - q) / n).collect())
        .collect()
}

fn check_batch(xhat: &[Vec<f64>], x: &[Vec<f64>]) -> Result<()> {
    if xhat.is_empty() {
        return Err(PiernError::Empty("stage-2 batch"));
    }
    if xhat.len() != x.len() || xhat.iter().zip(x).any(|(a, b)| a.len() != b.len()) {
        return Err(PiernError::Shape("stage-2 prediction/target batch".into()));
    }
    Ok(())
}

/// One-directional in-batch InfoNCE over cosine similarity, summed over the batch.
pub fn contrastive_loss(xhat: &[Vec<f64>], x: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(contrastive_loss_with_grad(xhat, x, tau)?.0)
}

/// [`contrastive_loss`] and its gradient with respect to each prediction.
pub fn contrastive_loss_with_grad(xhat: &[Vec<f64>], x: &[Vec<f64>], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(xhat, x)?;
    if tau <= 0.0 {
        return Err(PiernError::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = xhat.len();
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; xhat[0].len()]; n];
    for i in 0..n {
        let na = norm(&xhat[i]);
        let mut logits = Vec::with_capacity(n);
        for xj in x {
            logits.push(cosine_sim(&xhat[i], xj)? / tau);
        }
        let mut p = logits.clone();
        softmax_in_place(&mut p);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[i];
        for j in 0..n {
            let ds = (p[j] - if i == j { 1.0 } else { 0.0 }) / tau;
            let nb = norm(&x[j]);
            let cos = logits[j] * tau;
            for (g, (a, b)) in grad[i].iter_mut().zip(xhat[i].iter().zip(&x[j])) {
                *g += ds * (b / (na * nb) - cos * a / (na * na));
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub lambda: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub contrastive: bool,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Learning rate decays geometrically to this fraction by the last epoch.
    pub final_lr_frac: f64,
    /// Independent descents; each slot keeps its best one.
    pub restarts: usize,
    /// Least-squares refit of the value tables after descent.
    pub refit: bool,
    /// Ridge strength of the refit, relative to the mean Gram diagonal.
    pub refit_ridge: f64,
    /// Alternations between the two value tables.
    pub refit_rounds: usize,
    /// Query scale factors tried before the refit.
    pub sharpen: Vec<f64>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            tau: 0.07,
            batch_size: 8,
            contrastive: false,
            epochs: 60,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            final_lr_frac: 0.01,
            restarts: 2,
            refit: true,
            refit_ridge: 1e-6,
            refit_rounds: 3,
            sharpen: vec![4.0, 16.0, 64.0],
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 || self.lambda < 0.0 || self.batch_size == 0 {
            return Err(PiernError::Config(format!(
                "stage 2 needs tau > 0, lambda >= 0, batch >= 1 (got {}, {}, {})",
                self.tau, self.lambda, self.batch_size
            )));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        if self.contrastive {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Stage-2 objective and its gradient with respect to each prediction.
pub fn stage2_loss_with_grad(xhat: &[Vec<f64>], x: &[Vec<f64>], config: &Stage2Config) -> Result<(f64, Vec<Vec<f64>>)> {
    config.validate()?;
    let mse = text2comp_mse(xhat, x)?;
    let mut grad = text2comp_mse_grad(xhat, x);
    let lambda = config.effective_lambda();
    if lambda == 0.0 {
        return Ok((mse, grad));
    }
    let (c, cg) = contrastive_loss_with_grad(xhat, x, config.tau)?;
    for (g, h) in grad.iter_mut().zip(cg) {
        g.iter_mut().zip(h).for_each(|(a, b)| *a += lambda * b);
    }
    Ok((mse + lambda * c, grad))
}

pub fn stage2_loss(xhat: &[Vec<f64>], x: &[Vec<f64>], config: &Stage2Config) -> Result<f64> {
    Ok(stage2_loss_with_grad(xhat, x, config)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignerConfig {
    pub value_rank: usize,
    pub key_dim: usize,
    pub window_before: usize,
    pub window_after: usize,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            value_rank: 2,
            key_dim: 16,
            window_before: 9,
            window_after: 1,
        }
    }
}

impl AlignerConfig {
    fn n_off(&self) -> usize {
        self.window_before + self.window_after + 1
    }
}

const VAL_A: usize = 0;
const BIAS_A: usize = 1;
const VAL_B: usize = 2;
const BIAS_B: usize = 3;
const KEY_TAB: usize = 4;
const KEY_H: usize = 5;
const QUERIES: usize = 6;
const HEAD_W: usize = 7;
const HEAD_B: usize = 8;

/// Positions attended less than this are left out of the value refit.
const REFIT_MIN_ATTENTION: f64 = 1e-3;

/// Columns each slot owns in every parameter, in parameter order.
fn slot_widths(r: usize, dk: usize) -> [usize; 9] {
    [r, r, r, r, dk, dk, dk, r, 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligner {
    pub expert_id: String,
    pub config: AlignerConfig,
    pub vocab_size: usize,
    pub d_model: usize,
    /// Expert input statistics, for mapping slots back to raw units.
    pub stats: NormStats,
    /// Slots attend only to positions that close a number literal.
    pub numbers: NumberTokens,
    pub params: Vec<Parameter>,
}

/// Forward activations for one sequence, restricted to the attended positions.
pub struct AlignCache {
    hc: Vec<f64>,
    rows: Vec<(usize, f64)>,
    a: Vec<f64>,
    b: Vec<f64>,
    v: Vec<f64>,
    keys: Vec<f64>,
    alpha: Vec<f64>,
    ctx: Vec<f64>,
}

impl Aligner {
    pub fn new<R: Rng + ?Sized>(
        expert_id: &str,
        config: AlignerConfig,
        numbers: NumberTokens,
        d_model: usize,
        stats: NormStats,
        rng: &mut R,
    ) -> Self {
        let vocab_size = numbers.digits.len();
        let (r, dk, k) = (config.value_rank, config.key_dim, stats.dim());
        let rows = config.n_off() * (vocab_size + 2);
        let params = vec![
            Parameter::zeros(&[rows, k * r]),
            Parameter::zeros(&[k * r]),
            Parameter::zeros(&[rows, k * r]),
            Parameter::new(Tensor::full(&[k * r], 1.0)),
            Parameter::zeros(&[rows, k * dk]),
            Parameter::randn(&[d_model, k * dk], 0.1 / (d_model as f64).sqrt(), rng),
            Parameter::randn(&[k, dk], 1.0, rng),
            Parameter::randn(&[k, r], (1.0 / r as f64).sqrt(), rng),
            Parameter::zeros(&[k]),
        ];
        Self {
            expert_id: expert_id.to_string(),
            config,
            vocab_size,
            d_model,
            stats,
            numbers,
            params,
        }
    }

    /// Positions holding the last digit of a number.
    pub fn number_ends(&self, ids: &[u32]) -> Vec<usize> {
        self.numbers.number_ends(ids)
    }

    pub fn slots(&self) -> usize {
        self.stats.dim()
    }

    pub fn hash(&self) -> String {
        hash_params(&self.params)
    }

    pub fn freeze(&mut self) {
        self.params.iter_mut().for_each(Parameter::freeze);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Overwrites slot `s` with the same slot of `other`.
    pub fn copy_slot(&mut self, other: &Aligner, s: usize) {
        let k = self.slots();
        for (pi, &w) in slot_widths(self.config.value_rank, self.config.key_dim).iter().enumerate() {
            let src = other.params[pi].value.data();
            let dst = self.params[pi].value.data_mut();
            for start in (0..dst.len()).step_by(k * w) {
                let range = start + s * w..start + (s + 1) * w;
                dst[range.clone()].copy_from_slice(&src[range]);
            }
        }
    }

    fn table_rows(&self) -> usize {
        self.config.n_off() * (self.vocab_size + 2)
    }

    /// Weighted table rows hit by the window around each listed position,
    /// two per offset. A non-digit token uses its own row; every digit shares
    /// an indicator row and adds a row scaled by its value, so the tables are
    /// affine in each digit.
    fn window_rows(&self, ids: &[u32], positions: &[usize]) -> Vec<(usize, f64)> {
        let before = self.config.window_before as isize;
        let after = self.config.window_after as isize;
        let (t, v) = (ids.len() as isize, self.vocab_size);
        let mut rows = Vec::with_capacity(2 * positions.len() * self.config.n_off());
        for &pos in positions {
            for (o, off) in (-before..=after).enumerate() {
                let p = pos as isize + off;
                let id = if (0..t).contains(&p) { ids[p as usize] } else { PAD };
                let base = o * (v + 2);
                match self.numbers.digit_value(id) {
                    Some(d) => {
                        rows.push((base + v, 1.0));
                        rows.push((base + v + 1, (f64::from(d) - 4.5) / 4.5));
                    }
                    None => {
                        rows.push((base + id as usize, 1.0));
                        rows.push((base + v + 1, 0.0));
                    }
                }
            }
        }
        rows
    }

    fn check(&self, ids: &[u32], hidden: &[f64]) -> Result<()> {
        if ids.is_empty() {
            return Err(PiernError::Empty("aligner input"));
        }
        if hidden.len() != ids.len() * self.d_model {
            return Err(PiernError::Shape(format!(
                "aligner got {} hidden values for {} tokens of width {}",
                hidden.len(),
                ids.len(),
                self.d_model
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(PiernError::Tokenizer(format!("token id {bad} outside aligner vocabulary")));
        }
        Ok(())
    }

    /// Normalized slot values and the activations for [`Self::backward`].
    pub fn forward(&self, ids: &[u32], hidden: &[f64]) -> Result<(Vec<f64>, AlignCache)> {
        self.check(ids, hidden)?;
        let (r, dk, k, no) = (self.config.value_rank, self.config.key_dim, self.slots(), self.config.n_off());
        let cand = self.number_ends(ids);
        if cand.is_empty() {
            return Err(PiernError::Empty("numbers in aligner input"));
        }
        let (c, d, kr, kd) = (cand.len(), self.d_model, k * r, k * dk);
        let rows = self.window_rows(ids, &cand);
        let mut hc = Vec::with_capacity(c * d);
        for &pos in &cand {
            hc.extend_from_slice(&hidden[pos * d..(pos + 1) * d]);
        }
        let (va, vb, kt) = (self.params[VAL_A].w(), self.params[VAL_B].w(), self.params[KEY_TAB].w());
        let mut a = vec![0.0; c * kr];
        let mut b = vec![0.0; c * kr];
        let mut keys = matmul(&hc, self.params[KEY_H].w(), c, d, kd);
        for j in 0..c {
            a[j * kr..(j + 1) * kr].copy_from_slice(self.params[BIAS_A].w());
            b[j * kr..(j + 1) * kr].copy_from_slice(self.params[BIAS_B].w());
            for (n, &(row, w)) in rows[2 * j * no..2 * (j + 1) * no].iter().enumerate() {
                for i in 0..kr {
                    a[j * kr + i] += w * va[row * kr + i];
                    b[j * kr + i] += w * vb[row * kr + i];
                }
                if n % 2 == 0 {
                    for i in 0..kd {
                        keys[j * kd + i] += kt[row * kd + i];
                    }
                }
            }
        }
        let v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let q = self.params[QUERIES].w();
        let mut alpha = vec![0.0; k * c];
        let mut ctx = vec![0.0; k * r];
        let mut out = vec![0.0; k];
        for s in 0..k {
            let qs = &q[s * dk..(s + 1) * dk];
            let al = &mut alpha[s * c..(s + 1) * c];
            for j in 0..c {
                al[j] = dot(qs, &keys[j * kd + s * dk..j * kd + (s + 1) * dk]);
            }
            softmax_in_place(al);
            for j in 0..c {
                for i in 0..r {
                    ctx[s * r + i] += al[j] * v[j * kr + s * r + i];
                }
            }
            out[s] = dot(&self.params[HEAD_W].w()[s * r..(s + 1) * r], &ctx[s * r..(s + 1) * r]) + self.params[HEAD_B].w()[s];
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(PiernError::NonFinite("aligner output"));
        }
        Ok((
            out,
            AlignCache {
                hc,
                rows,
                a,
                b,
                v,
                keys,
                alpha,
                ctx,
            },
        ))
    }

    /// Accumulates gradients for `dy` (one value per slot).
    pub fn backward(&mut self, cache: &AlignCache, dy: &[f64]) {
        let (r, dk, k, no) = (self.config.value_rank, self.config.key_dim, self.slots(), self.config.n_off());
        let c = cache.alpha.len() / k;
        let (kr, kd) = (k * r, k * dk);
        let mut dv = vec![0.0; c * kr];
        let mut dkeys = vec![0.0; c * kd];
        let mut dq = vec![0.0; k * dk];
        let mut dhw = vec![0.0; k * r];
        let mut dhb = vec![0.0; k];
        {
            let hw = self.params[HEAD_W].w();
            let q = self.params[QUERIES].w();
            for s in 0..k {
                dhb[s] += dy[s];
                let mut dctx = vec![0.0; r];
                for i in 0..r {
                    dhw[s * r + i] += dy[s] * cache.ctx[s * r + i];
                    dctx[i] = dy[s] * hw[s * r + i];
                }
                let al = &cache.alpha[s * c..(s + 1) * c];
                let mut dal = vec![0.0; c];
                for j in 0..c {
                    let base = j * kr + s * r;
                    dal[j] = dot(&dctx, &cache.v[base..base + r]);
                    for i in 0..r {
                        dv[base + i] += al[j] * dctx[i];
                    }
                }
                let mean = dot(al, &dal);
                let qs = &q[s * dk..(s + 1) * dk];
                for j in 0..c {
                    let ds = al[j] * (dal[j] - mean);
                    let base = j * kd + s * dk;
                    for i in 0..dk {
                        dq[s * dk + i] += ds * cache.keys[base + i];
                        dkeys[base + i] += ds * qs[i];
                    }
                }
            }
        }
        self.params[HEAD_W].g().iter_mut().zip(&dhw).for_each(|(a, b)| *a += b);
        self.params[HEAD_B].g().iter_mut().zip(&dhb).for_each(|(a, b)| *a += b);
        self.params[QUERIES].g().iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
        gemm(self.d_model, c, kd, &cache.hc, true, &dkeys, false, 1.0, self.params[KEY_H].g());
        let da: Vec<f64> = dv.iter().zip(&cache.b).map(|(x, y)| x * y).collect();
        let db: Vec<f64> = dv.iter().zip(&cache.a).map(|(x, y)| x * y).collect();
        for j in 0..c {
            let (daj, dbj) = (&da[j * kr..(j + 1) * kr], &db[j * kr..(j + 1) * kr]);
            self.params[BIAS_A].g().iter_mut().zip(daj).for_each(|(a, b)| *a += b);
            self.params[BIAS_B].g().iter_mut().zip(dbj).for_each(|(a, b)| *a += b);
            for (n, &(row, w)) in cache.rows[2 * j * no..2 * (j + 1) * no].iter().enumerate() {
                let ga = &mut self.params[VAL_A].g()[row * kr..(row + 1) * kr];
                ga.iter_mut().zip(daj).for_each(|(a, b)| *a += w * b);
                let gb = &mut self.params[VAL_B].g()[row * kr..(row + 1) * kr];
                gb.iter_mut().zip(dbj).for_each(|(a, b)| *a += w * b);
                if n % 2 == 0 {
                    let gk = &mut self.params[KEY_TAB].g()[row * kd..(row + 1) * kd];
                    gk.iter_mut().zip(&dkeys[j * kd..(j + 1) * kd]).for_each(|(a, b)| *a += b);
                }
            }
        }
    }

    /// Attended positions and the slot-major attention weights over them.
    pub fn attention(&self, ids: &[u32], hidden: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let (_, cache) = self.forward(ids, hidden)?;
        Ok((self.number_ends(ids), cache.alpha))
    }

    /// Normalized expert-input estimate for one sequence.
    pub fn extract_inputs(&self, ids: &[u32], hidden: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(ids, hidden)?.0)
    }

    /// Multiply-accumulates for one extraction over `ids`.
    pub fn macs(&self, ids: &[u32]) -> u64 {
        let (r, dk, k, no) = (self.config.value_rank, self.config.key_dim, self.slots(), self.config.n_off());
        let c = self.number_ends(ids).len();
        (c * (self.d_model * k * dk + no * (4 * k * r + k * dk) + k * r + k * (dk + r)) + k * r) as u64
    }

    /// Re-solves the value tables `A` and `B` (with their biases and the
    /// head bias) by alternating ridge least squares, attention and head
    /// weights held fixed. The refit runs from several starting points: as
    /// trained, with the gate `B` reset to one, and each of those with every
    /// slot query scaled by a factor from `sharpen`. Each slot keeps the
    /// variant with the lowest training error.
    pub fn polish(&mut self, examples: &[AlignExample], ridge: f64, rounds: usize, sharpen: &[f64]) -> Result<()> {
        let base = self.clone();
        let mut best = slot_mse(self, examples)?;
        for &f in std::iter::once(&1.0).chain(sharpen) {
            for reset_gate in [false, true] {
                let mut cand = base.clone();
                cand.params[QUERIES].value.data_mut().iter_mut().for_each(|q| *q *= f);
                if reset_gate {
                    cand.params[VAL_B].value.fill(0.0);
                    cand.params[BIAS_B].value.fill(1.0);
                }
                for _ in 0..rounds {
                    cand.refit_table(examples, ridge, true)?;
                    cand.refit_table(examples, ridge, false)?;
                }
                for (s, m) in slot_mse(&cand, examples)?.into_iter().enumerate() {
                    if m < best[s] {
                        best[s] = m;
                        self.copy_slot(&cand, s);
                    }
                }
            }
        }
        Ok(())
    }

    fn refit_table(&mut self, examples: &[AlignExample], ridge: f64, table_a: bool) -> Result<()> {
        if examples.is_empty() {
            return Ok(());
        }
        let (r, k, no) = (self.config.value_rank, self.slots(), self.config.n_off());
        let kr = k * r;
        let runs: Vec<(Vec<f64>, AlignCache)> = examples
            .iter()
            .map(|e| self.forward(&e.ids, &e.hidden))
            .collect::<Result<_>>()?;
        let before = slot_mse(self, examples)?;
        let n_rows = self.table_rows();
        for s in 0..k {
            let hw = self.params[HEAD_W].w()[s * r..(s + 1) * r].to_vec();
            let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
            let mut feats: Vec<Vec<(usize, f64)>> = Vec::with_capacity(examples.len());
            for (_, cache) in &runs {
                let c = cache.alpha.len() / k;
                let mut phi: BTreeMap<usize, f64> = BTreeMap::new();
                phi.insert(n_rows * r + r, 1.0);
                for j in 0..c {
                    let al = cache.alpha[s * c + j];
                    if al < REFIT_MIN_ATTENTION {
                        continue;
                    }
                    for i in 0..r {
                        let other = if table_a { &cache.b } else { &cache.a };
                        let coef = hw[i] * al * other[j * kr + s * r + i];
                        *phi.entry(n_rows * r + i).or_default() += coef;
                        for &(row, w) in &cache.rows[2 * j * no..2 * (j + 1) * no] {
                            if w != 0.0 {
                                *phi.entry(row * r + i).or_default() += coef * w;
                            }
                        }
                    }
                }
                let mut sparse: Vec<(usize, f64)> = phi
                    .into_iter()
                    .map(|(key, val)| {
                        let n = cols.len();
                        (*cols.entry(key).or_insert(n), val)
                    })
                    .collect();
                sparse.sort_by_key(|&(col, _)| col);
                feats.push(sparse);
            }
            let m = cols.len();
            let mut keys = vec![0; m];
            for (&key, &col) in &cols {
                keys[col] = key;
            }
            let theta0: Vec<f64> = keys
                .iter()
                .map(|&key| *self.feature_slot(key, s, n_rows, table_a))
                .collect();
            let mut gram = DMatrix::<f64>::zeros(m, m);
            let mut rhs = DVector::<f64>::zeros(m);
            for ((phi, e), (out, _)) in feats.iter().zip(examples).zip(&runs) {
                let resid = e.x[s] - out[s];
                for &(ci, vi) in phi {
                    rhs[ci] += vi * resid;
                    for &(cj, vj) in phi {
                        gram[(ci, cj)] += vi * vj;
                    }
                }
            }
            let scale = (0..m).map(|i| gram[(i, i)]).sum::<f64>() / m as f64;
            for i in 0..m {
                gram[(i, i)] += ridge * scale.max(1e-300);
            }
            let Some(chol) = gram.cholesky() else { continue };
            let delta = chol.solve(&rhs);
            let saved = self.clone();
            for (col, &key) in keys.iter().enumerate() {
                let v = theta0[col] + delta[col];
                *self.feature_slot(key, s, n_rows, table_a) = v;
            }
            let after = slot_mse(self, examples)?;
            if !(after[s] < before[s]) {
                self.copy_slot(&saved, s);
            }
        }
        Ok(())
    }

    fn feature_slot(&mut self, key: usize, s: usize, n_rows: usize, table_a: bool) -> &mut f64 {
        let r = self.config.value_rank;
        let kr = self.slots() * r;
        let (row, i) = (key / r, key % r);
        let (table, bias) = if table_a { (VAL_A, BIAS_A) } else { (VAL_B, BIAS_B) };
        if key == n_rows * r + r {
            &mut self.params[HEAD_B].value.data_mut()[s]
        } else if row == n_rows {
            &mut self.params[bias].value.data_mut()[s * r + i]
        } else {
            &mut self.params[table].value.data_mut()[row * kr + s * r + i]
        }
    }

    pub fn save(&self, stem: &Path, backbone_hash: &str, expert_hash: &str) -> Result<String> {
        let file = AlignerFile {
            expert_id: self.expert_id.clone(),
            config: self.config,
            d_model: self.d_model,
            stats: self.stats.clone(),
            numbers: self.numbers.clone(),
        };
        let mut meta = BTreeMap::new();
        meta.insert("backbone_hash".into(), backbone_hash.to_string());
        meta.insert("expert_hash".into(), expert_hash.to_string());
        let names: Vec<String> = [
            "val_a", "bias_a", "val_b", "bias_b", "key_table", "key_hidden", "queries", "head_w", "head_b",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        checkpoint::save(stem, "aligner", &file, meta, &checkpoint::named(&names, &self.params))
    }

    /// Loads a frozen aligner with the backbone and expert hashes it was trained against.
    pub fn load(stem: &Path) -> Result<(Self, String, String)> {
        let (manifest, params) = checkpoint::load(stem)?;
        manifest.expect_kind("aligner")?;
        let f: AlignerFile = manifest.config()?;
        if params.len() != 9 {
            return Err(PiernError::Checkpoint(format!("aligner has {} tensors", params.len())));
        }
        let al = Self {
            expert_id: f.expert_id,
            config: f.config,
            vocab_size: f.numbers.digits.len(),
            d_model: f.d_model,
            stats: f.stats,
            numbers: f.numbers,
            params,
        };
        Ok((al, manifest.meta("backbone_hash")?.to_string(), manifest.meta("expert_hash")?.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct AlignerFile {
    expert_id: String,
    config: AlignerConfig,
    d_model: usize,
    stats: NormStats,
    numbers: NumberTokens,
}

/// A tokenized stage-2 example with its cached backbone states.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignExample {
    pub ids: Vec<u32>,
    pub hidden: Vec<f64>,
    /// Normalized target features.
    pub x: Vec<f64>,
}

impl AlignExample {
    pub fn new(backbone: &Backbone, ids: Vec<u32>, x_norm: Vec<f64>) -> Result<Self> {
        let st = backbone.lm_forward(&ids)?;
        Ok(Self {
            hidden: st.hidden().to_vec(),
            ids,
            x: x_norm,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    /// Held-out normalized extraction MSE after each epoch of the first descent.
    pub heldout_mse: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub final_heldout_mse: f64,
    /// Largest absolute normalized slot error on the held-out set.
    pub max_abs_error: f64,
    pub seconds: f64,
}

impl Stage2Report {
    /// First epoch (1-based) whose held-out MSE is at or below `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.heldout_mse.iter().position(|&m| m <= threshold).map(|i| i + 1)
    }
}

/// Held-out normalized MSE and max absolute slot error.
pub fn evaluate(aligner: &Aligner, examples: &[AlignExample]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut preds = Vec::with_capacity(examples.len());
    let mut max_err: f64 = 0.0;
    for e in examples {
        let p = aligner.extract_inputs(&e.ids, &e.hidden)?;
        for (a, b) in p.iter().zip(&e.x) {
            max_err = max_err.max((a - b).abs());
        }
        preds.push(p);
    }
    let targets: Vec<Vec<f64>> = examples.iter().map(|e| e.x.clone()).collect();
    Ok((text2comp_mse(&preds, &targets)?, max_err))
}

/// Mean squared error of each slot.
pub fn slot_mse(aligner: &Aligner, examples: &[AlignExample]) -> Result<Vec<f64>> {
    let mut per = vec![0.0; aligner.slots()];
    for e in examples {
        let p = aligner.extract_inputs(&e.ids, &e.hidden)?;
        for (m, (a, b)) in per.iter_mut().zip(p.iter().zip(&e.x)) {
            *m += (a - b) * (a - b) / examples.len() as f64;
        }
    }
    Ok(per)
}

struct Descent {
    aligner: Aligner,
    heldout_mse: Vec<f64>,
    train_loss: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn descend(
    expert_id: &str,
    stats: &NormStats,
    train: &[AlignExample],
    heldout: &[AlignExample],
    numbers: &NumberTokens,
    d_model: usize,
    aligner_config: AlignerConfig,
    config: &Stage2Config,
    seed: u64,
) -> Result<Descent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut al = Aligner::new(expert_id, aligner_config, numbers.clone(), d_model, stats.clone(), &mut rng);
    let mut opt = {
        let refs: Vec<&mut Parameter> = al.params.iter_mut().collect();
        Adam::new(config.adam, &refs)
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let decay = config.final_lr_frac.powf(1.0 / (config.epochs.max(2) - 1) as f64);
    let mut heldout_mse = Vec::with_capacity(config.epochs);
    let mut train_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.set_lr(config.adam.lr * decay.powi(epoch as i32));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            al.zero_grad();
            let mut preds = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            for &i in batch {
                let (p, c) = al.forward(&train[i].ids, &train[i].hidden)?;
                preds.push(p);
                caches.push(c);
            }
            let targets: Vec<Vec<f64>> = batch.iter().map(|&i| train[i].x.clone()).collect();
            let (loss, grads) = stage2_loss_with_grad(&preds, &targets, config)?;
            if !loss.is_finite() {
                return Err(PiernError::Diverged { epoch, loss });
            }
            sum += loss;
            batches += 1;
            for (c, g) in caches.iter().zip(&grads) {
                al.backward(c, g);
            }
            let mut refs: Vec<&mut Parameter> = al.params.iter_mut().collect();
            opt.step(&mut refs)?;
        }
        train_loss.push(sum / batches as f64);
        if !heldout.is_empty() {
            heldout_mse.push(evaluate(&al, heldout)?.0);
        }
    }
    Ok(Descent {
        aligner: al,
        heldout_mse,
        train_loss,
    })
}

/// Trains an aligner for one expert on cached backbone states; the backbone
/// itself is never touched. Each restart runs a full descent from a fresh
/// initialization and every slot keeps the restart with the lowest training
/// error; the value tables are then refit by least squares.
#[allow(clippy::too_many_arguments)]
pub fn train_text2comp(
    expert_id: &str,
    stats: &NormStats,
    train: &[AlignExample],
    heldout: &[AlignExample],
    numbers: &NumberTokens,
    d_model: usize,
    aligner_config: AlignerConfig,
    config: &Stage2Config,
    seed: u64,
) -> Result<(Aligner, Stage2Report)> {
    config.validate()?;
    if train.is_empty() {
        return Err(PiernError::Empty("stage-2 training set"));
    }
    let start = Instant::now();
    let mut best: Option<(Aligner, Vec<f64>)> = None;
    let mut heldout_mse = Vec::new();
    let mut train_loss = Vec::new();
    for restart in 0..config.restarts.max(1) {
        let run_seed = seed.wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let run = descend(expert_id, stats, train, heldout, numbers, d_model, aligner_config, config, run_seed)?;
        let per = slot_mse(&run.aligner, train)?;
        if restart == 0 {
            heldout_mse = run.heldout_mse;
            train_loss = run.train_loss;
        }
        match &mut best {
            None => best = Some((run.aligner, per)),
            Some((al, best_per)) => {
                for s in 0..per.len() {
                    if per[s] < best_per[s] {
                        al.copy_slot(&run.aligner, s);
                        best_per[s] = per[s];
                    }
                }
            }
        }
    }
    let (mut al, _) = best.expect("at least one restart");
    if config.refit {
        al.polish(train, config.refit_ridge, config.refit_rounds, &config.sharpen)?;
    }
    al.freeze();
    let (final_heldout_mse, max_abs_error) = evaluate(&al, heldout)?;
    Ok((
        al,
        Stage2Report {
            heldout_mse,
            train_loss,
            final_heldout_mse,
            max_abs_error,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_TOLERANCE};

    #[test]
    fn mse_examples() {
        assert_eq!(text2comp_mse(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(text2comp_mse(&[vec![1.0, -1.0]], &[vec![0.0, 0.0]]).unwrap(), 2.0);
        assert!(text2comp_mse(&[], &[]).is_err());
    }

    #[test]
    fn contrastive_closed_forms() {
        assert_eq!(contrastive_loss(&[vec![0.3, -1.0]], &[vec![2.0, 0.5]], 0.07).unwrap(), 0.0);
        let xhat = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let got = contrastive_loss(&xhat, &xhat, 1.0).unwrap();
        let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((got - want).abs() < 1e-12);
        assert!(matches!(
            contrastive_loss(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 1.0),
            Err(PiernError::ZeroNorm(_))
        ));
    }

    fn toy_aligner(rng: &mut ChaCha8Rng) -> (Aligner, Vec<u32>, Vec<f64>) {
        let stats = NormStats {
            x_mean: vec![0.0; 3],
            x_std: vec![1.0; 3],
            y_mean: 0.0,
            y_std: 1.0,
        };
        let config = AlignerConfig {
            value_rank: 2,
            key_dim: 3,
            window_before: 2,
            window_after: 1,
        };
        let numbers = NumberTokens {
            digits: vec![None, None, None, Some(3), Some(4), None],
            point: Some(5),
        };
        let mut al = Aligner::new("toy", config, numbers, 4, stats, rng);
        for p in &mut al.params {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let ids = vec![3, 0, 3, 5, 4, 3, 1, 4];
        let hidden: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
        (al, ids, hidden)
    }

    #[test]
    fn stage2_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let (al, ids, hidden) = toy_aligner(&mut rng);
            let targets = vec![vec![0.5, -1.0, 0.2 + trial as f64 * 0.1], vec![-0.3, 0.8, 1.1]];
            let ids2: Vec<u32> = ids.iter().rev().copied().collect();
            for config in [
                Stage2Config::default(),
                Stage2Config {
                    contrastive: true,
                    lambda: 0.5,
                    tau: 0.5,
                    ..Stage2Config::default()
                },
            ] {
                let mut params = al.params.clone();
                let report = grad_check(
                    |ps| {
                        let mut m = al.clone();
                        m.params = ps.to_vec();
                        m.zero_grad();
                        let (p1, c1) = m.forward(&ids, &hidden)?;
                        let (p2, c2) = m.forward(&ids2, &hidden)?;
                        let (loss, g) = stage2_loss_with_grad(&[p1, p2], &targets, &config)?;
                        m.backward(&c1, &g[0]);
                        m.backward(&c2, &g[1]);
                        for (p, q) in ps.iter_mut().zip(&m.params) {
                            p.grad = q.grad.clone();
                        }
                        Ok(loss)
                    },
                    &mut params,
                    DEFAULT_TOLERANCE,
                )
                .unwrap();
                assert!(report.passed, "{report:?}");
            }
        }
    }

    fn toy_examples(rng: &mut ChaCha8Rng, al: &Aligner, n: usize) -> Vec<AlignExample> {
        (0..n)
            .map(|_| {
                let ids: Vec<u32> = (0..8).map(|_| rng.gen_range(0..6)).chain([3]).collect();
                let hidden = (0..ids.len() * al.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let x = (0..al.slots()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                AlignExample { ids, hidden, x }
            })
            .collect()
    }

    #[test]
    fn polish_never_raises_slot_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut al, _, _) = toy_aligner(&mut rng);
        let examples = toy_examples(&mut rng, &al, 40);
        let before = slot_mse(&al, &examples).unwrap();
        al.polish(&examples, 1e-6, 2, &[4.0]).unwrap();
        let after = slot_mse(&al, &examples).unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!(a <= b, "{after:?} vs {before:?}");
        }
        assert!(after.iter().sum::<f64>() < before.iter().sum::<f64>());
    }

    #[test]
    fn copied_slot_reproduces_its_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut a, ids, hidden) = toy_aligner(&mut rng);
        let (b, _, _) = toy_aligner(&mut rng);
        let ya = a.extract_inputs(&ids, &hidden).unwrap();
        let yb = b.extract_inputs(&ids, &hidden).unwrap();
        a.copy_slot(&b, 1);
        let y = a.extract_inputs(&ids, &hidden).unwrap();
        assert_eq!(y, vec![ya[0], yb[1], ya[2]]);
    }

    #[test]
    fn text_without_numbers_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (al, _, _) = toy_aligner(&mut rng);
        let ids = vec![0, 1, 2, 5];
        assert!(matches!(
            al.extract_inputs(&ids, &vec![0.0; 16]),
            Err(PiernError::Empty(_))
        ));
    }

    #[test]
    fn stage2_is_affine_in_lambda() {
        let xhat = vec![vec![0.3, -0.2, 1.0], vec![0.9, 0.1, -0.4], vec![-0.5, 0.5, 0.5]];
        let x = vec![vec![0.2, -0.1, 1.1], vec![1.0, 0.0, -0.5], vec![-0.6, 0.4, 0.7]];
        let at = |l: f64| {
            stage2_loss(
                &xhat,
                &x,
                &Stage2Config {
                    lambda: l,
                    contrastive: true,
                    ..Stage2Config::default()
                },
            )
            .unwrap()
        };
        assert!((at(0.2) + at(1.4) - 2.0 * at(0.8)).abs() < 1e-12);
        assert_eq!(at(0.0), text2comp_mse(&xhat, &x).unwrap());
        let off = stage2_loss(&xhat, &x, &Stage2Config::default()).unwrap();
        assert_eq!(off, at(0.0));
    }
}

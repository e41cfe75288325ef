//! Stage 1: numeric experts and the expert registry.
//!
//! An expert is a small regressor trained on `(x, y)` pairs of one task with
//! z-scored inputs and outputs, then frozen. Frozen experts are identified by
//! the SHA-256 of their parameter bytes; that hash must not change for the
//! rest of the pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::datagen::{DatasetSplit, NormStats, Sample, Task};
use crate::error::{PiernError, Result};
use crate::nn::{Activation, Mlp};
use crate::numerics::{hash_params, Adam, AdamConfig, Parameter};

/// `(1/N) * sum ||pred_i - target_i||^2` over rows of width `dim`.
pub fn expert_mse(pred: &[f64], target: &[f64], dim: usize) -> Result<f64> {
    if pred.len() != target.len() || dim == 0 || pred.len() % dim != 0 {
        return Err(PiernError::Shape(format!(
            "expert_mse: {} predictions vs {} targets (dim {dim})",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() / dim;
    if n == 0 {
        return Err(PiernError::Empty("expert_mse batch"));
    }
    let sq: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sq / n as f64)
}

/// Gradient of [`expert_mse`] with respect to `pred`.
pub fn expert_mse_grad(pred: &[f64], target: &[f64], dim: usize) -> Vec<f64> {
    let n = (pred.len() / dim) as f64;
    pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    /// Stop after this many epochs without a train-MSE improvement above `min_delta`.
    pub patience: usize,
    pub min_delta: f64,
    /// Halve the learning rate after this many epochs without improvement.
    pub plateau: usize,
    pub min_lr: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Silu,
            batch_size: 64,
            adam: AdamConfig::default(),
            max_epochs: 2000,
            patience: 50,
            min_delta: 1e-7,
            plateau: 15,
            min_lr: 1e-6,
        }
    }
}

impl ExpertConfig {
    /// Per-task defaults. The profit target is bilinear in its inputs, so the
    /// linear-task expert is a single quadratic layer.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Nonlinear => Self::default(),
            Task::Linear => Self {
                hidden: vec![128],
                activation: Activation::Square,
                ..Self::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertReport {
    pub epochs: usize,
    pub train_mse_norm: f64,
    pub test_mse_norm: f64,
    pub train_mse_raw: f64,
    pub test_mse_raw: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub id: String,
    pub task: Task,
    pub net: Mlp,
    pub stats: NormStats,
    frozen: bool,
    hash: Option<String>,
}

impl ExpertModel {
    pub fn new(id: &str, task: Task, net: Mlp, stats: NormStats) -> Result<Self> {
        if net.input_dim() != task.input_dim() || net.output_dim() != 1 || stats.dim() != task.input_dim() {
            return Err(PiernError::Shape(format!(
                "expert for {task} needs {} -> 1, got {} -> {}",
                task.input_dim(),
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self {
            id: id.to_string(),
            task,
            net,
            stats,
            frozen: false,
            hash: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.task.input_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter non-trainable and records the content hash.
    pub fn freeze(&mut self) {
        for p in &mut self.net.params {
            p.freeze();
        }
        self.frozen = true;
        self.hash = Some(self.compute_hash());
    }

    pub fn compute_hash(&self) -> String {
        hash_params(&self.net.params)
    }

    /// Hash recorded at freeze time.
    pub fn frozen_hash(&self) -> Option<&str> {
        self.hash.as_deref()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.net.params
    }

    /// Raw-unit prediction for one input vector.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(PiernError::Shape(format!(
                "expert {} expects {} inputs, got {}",
                self.id,
                self.input_dim(),
                x.len()
            )));
        }
        let z = self.stats.normalize_x(x);
        let y = self.net.predict(&z, 1)?[0];
        Ok(self.stats.denormalize_y(y))
    }

    /// Raw-unit predictions for many rows.
    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut z = Vec::with_capacity(xs.len() * self.input_dim());
        for x in xs {
            if x.len() != self.input_dim() {
                return Err(PiernError::Shape(format!("expert {} row of {} inputs", self.id, x.len())));
            }
            z.extend(self.stats.normalize_x(x));
        }
        Ok(self
            .net
            .predict(&z, xs.len())?
            .into_iter()
            .map(|y| self.stats.denormalize_y(y))
            .collect())
    }

    pub fn macs_per_call(&self) -> u64 {
        self.net.macs_per_row()
    }

    pub fn save(&self, stem: &Path) -> Result<String> {
        let config = ExpertFileConfig {
            id: self.id.clone(),
            task: self.task,
            dims: self.net.dims.clone(),
            activation: self.net.activation,
            stats: self.stats.clone(),
            frozen: self.frozen,
        };
        let names = checkpoint::layer_names(&self.net.params);
        checkpoint::save(stem, "expert", &config, BTreeMap::new(), &checkpoint::named(&names, &self.net.params))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, params) = checkpoint::load(stem)?;
        manifest.expect_kind("expert")?;
        let c: ExpertFileConfig = manifest.config()?;
        if params.len() != 2 * (c.dims.len() - 1) {
            return Err(PiernError::Checkpoint(format!("expert {} has {} tensors", c.id, params.len())));
        }
        let net = Mlp {
            dims: c.dims,
            activation: c.activation,
            params,
        };
        let mut m = Self::new(&c.id, c.task, net, c.stats)?;
        if c.frozen {
            m.freeze();
        } else {
            m.net.params.iter_mut().for_each(|p| p.trainable = true);
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ExpertFileConfig {
    id: String,
    task: Task,
    dims: Vec<usize>,
    activation: Activation,
    stats: NormStats,
    frozen: bool,
}

fn design(samples: &[Sample], stats: &NormStats) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(samples.len() * stats.dim());
    let mut y = Vec::with_capacity(samples.len());
    for s in samples {
        x.extend(stats.normalize_x(&s.x));
        y.push(stats.normalize_y(s.y));
    }
    (x, y)
}

fn raw_mse(model: &ExpertModel, samples: &[Sample]) -> Result<f64> {
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let pred = model.predict_batch(&xs)?;
    let target: Vec<f64> = samples.iter().map(|s| s.y).collect();
    expert_mse(&pred, &target, 1)
}

/// Trains an expert on the split's training data and freezes it.
pub fn train_expert(split: &DatasetSplit, config: &ExpertConfig, seed: u64) -> Result<(ExpertModel, ExpertReport)> {
    let start = Instant::now();
    let stats = split.stats()?.clone();
    let task = split.task;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![task.input_dim()];
    dims.extend(&config.hidden);
    dims.push(1);
    let net = Mlp::new(&dims, config.activation, &mut rng);
    let mut model = ExpertModel::new(task.id(), task, net, stats.clone())?;

    let in_dim = task.input_dim();
    let (x, y) = design(&split.train, &stats);
    let n = split.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut opt = {
        let refs: Vec<&mut Parameter> = model.net.params.iter_mut().collect();
        Adam::new(config.adam, &refs)
    };

    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut since_lr = 0;
    let mut epochs = 0;
    let mut xb = Vec::new();
    let mut yb = Vec::new();
    for epoch in 0..config.max_epochs {
        epochs = epoch + 1;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(&x[i * in_dim..(i + 1) * in_dim]);
                yb.push(y[i]);
            }
            model.net.zero_grad();
            let (pred, cache) = model.net.forward(&xb, chunk.len())?;
            let loss = expert_mse(&pred, &yb, 1)?;
            total += loss * chunk.len() as f64;
            let g = expert_mse_grad(&pred, &yb, 1);
            model.net.backward(&cache, &g, false);
            let mut refs: Vec<&mut Parameter> = model.net.params.iter_mut().collect();
            opt.step(&mut refs)?;
        }
        let epoch_mse = total / n as f64;
        if !epoch_mse.is_finite() {
            return Err(PiernError::Diverged { epoch, loss: epoch_mse });
        }
        if best - epoch_mse > config.min_delta {
            best = epoch_mse;
            since_best = 0;
            since_lr = 0;
        } else {
            since_best += 1;
            since_lr += 1;
        }
        if since_best >= config.patience {
            break;
        }
        if since_lr >= config.plateau && opt.config.lr > config.min_lr {
            opt.set_lr((opt.config.lr * 0.5).max(config.min_lr));
            since_lr = 0;
        }
    }

    model.freeze();
    let norm_mse = |samples: &[Sample]| -> Result<f64> {
        if samples.is_empty() {
            return Ok(f64::NAN);
        }
        let (xs, ys) = design(samples, &stats);
        let pred = model.net.predict(&xs, samples.len())?;
        expert_mse(&pred, &ys, 1)
    };
    let report = ExpertReport {
        epochs,
        train_mse_norm: norm_mse(&split.train)?,
        test_mse_norm: norm_mse(&split.test)?,
        train_mse_raw: raw_mse(&model, &split.train)?,
        test_mse_raw: if split.test.is_empty() { f64::NAN } else { raw_mse(&model, &split.test)? },
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    model: ExpertModel,
}

/// Ordered expert registry. Routing index 0 is the language model; expert
/// `i` in registration order has routing index `i + 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertSet {
    entries: Vec<Entry>,
    router_stale: bool,
}

pub const LM_CLASS: usize = 0;

impl ExpertSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, model: ExpertModel) -> Result<usize> {
        if self.entries.iter().any(|e| e.model.id == model.id) {
            return Err(PiernError::DuplicateExpert(model.id));
        }
        if !model.is_frozen() {
            return Err(PiernError::NotFrozen(model.id));
        }
        self.entries.push(Entry { model });
        self.router_stale = true;
        Ok(self.entries.len())
    }

    /// Number of routing classes (experts plus the language model).
    pub fn n_classes(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when the registry changed since the last router was trained on it.
    pub fn router_stale(&self) -> bool {
        self.router_stale
    }

    pub fn mark_router_trained(&mut self) {
        self.router_stale = false;
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.model.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&ExpertModel> {
        self.entries
            .iter()
            .find(|e| e.model.id == id)
            .map(|e| &e.model)
            .ok_or_else(|| PiernError::UnknownExpert(id.to_string()))
    }

    pub fn by_class(&self, class: usize) -> Option<&ExpertModel> {
        class.checked_sub(1).and_then(|i| self.entries.get(i)).map(|e| &e.model)
    }

    pub fn class_of(&self, id: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.model.id == id)
            .map(|i| i + 1)
            .ok_or_else(|| PiernError::UnknownExpert(id.to_string()))
    }

    pub fn models(&self) -> impl Iterator<Item = &ExpertModel> {
        self.entries.iter().map(|e| &e.model)
    }

    pub fn predict(&self, id: &str, x: &[f64]) -> Result<f64> {
        self.get(id)?.predict(x)
    }

    /// Hash over registration order, ids, dims and parameter hashes.
    pub fn registry_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.model.id.as_bytes());
            h.update([0]);
            h.update((e.model.input_dim() as u64).to_le_bytes());
            h.update(e.model.compute_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes every expert checkpoint into `dir` plus `registry.json`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| PiernError::io(dir, e))?;
        let mut experts = Vec::new();
        for e in &self.entries {
            let file = format!("expert_{}", e.model.id);
            let hash = e.model.save(&dir.join(&file))?;
            experts.push(RegistryEntry {
                id: e.model.id.clone(),
                input_dim: e.model.input_dim(),
                path: file,
                hash,
            });
        }
        let reg = RegistryFile {
            experts,
            registry_hash: self.registry_hash(),
        };
        let path = dir.join("registry.json");
        fs::write(&path, serde_json::to_string_pretty(&reg)? + "\n").map_err(|e| PiernError::io(&path, e))?;
        Ok(path)
    }

    /// Reloads a registry in its persisted order, verifying every hash.
    pub fn load(registry: &Path) -> Result<Self> {
        let text = fs::read_to_string(registry).map_err(|e| PiernError::io(registry, e))?;
        let reg: RegistryFile = serde_json::from_str(&text)?;
        let dir = registry.parent().unwrap_or(Path::new("."));
        let mut set = Self::new();
        for entry in reg.experts {
            let model = ExpertModel::load(&dir.join(&entry.path))?;
            let found = model.compute_hash();
            if found != entry.hash || model.id != entry.id || model.input_dim() != entry.input_dim {
                return Err(PiernError::HashMismatch {
                    what: format!("expert {}", entry.id),
                    expected: entry.hash,
                    found,
                });
            }
            set.register(model)?;
        }
        let found = set.registry_hash();
        if found != reg.registry_hash {
            return Err(PiernError::RegistryMismatch {
                expected: reg.registry_hash,
                found,
            });
        }
        set.router_stale = false;
        Ok(set)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: String,
    pub input_dim: usize,
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryFile {
    pub experts: Vec<RegistryEntry>,
    pub registry_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;
    use crate::numerics::{grad_check, DEFAULT_TOLERANCE};

    #[test]
    fn mse_examples() {
        assert_eq!(expert_mse(&[1.0, 2.0], &[1.0, 2.0], 1).unwrap(), 0.0);
        assert_eq!(expert_mse(&[1.0, 2.0], &[0.0, 0.0], 1).unwrap(), 2.5);
        let a = expert_mse(&[1.0, -3.0, 0.5], &[0.0; 3], 1).unwrap();
        let b = expert_mse(&[2.0, -6.0, 1.0], &[0.0; 3], 1).unwrap();
        assert_eq!(b, 4.0 * a);
        assert!(matches!(expert_mse(&[], &[], 1), Err(PiernError::Empty(_))));
    }

    #[test]
    fn mse_gradient_through_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let net = Mlp::new(&[4, 6, 6, 1], Activation::Silu, &mut rng);
            let x: Vec<f64> = (0..12).map(|i| ((i + trial) as f64 * 0.7).sin()).collect();
            let y: Vec<f64> = (0..3).map(|i| (i as f64 + trial as f64).cos()).collect();
            let mut params = net.params.clone();
            let report = grad_check(
                |ps| {
                    let mut m = net.clone();
                    m.params = ps.to_vec();
                    let (pred, cache) = m.forward(&x, 3)?;
                    let loss = expert_mse(&pred, &y, 1)?;
                    m.backward(&cache, &expert_mse_grad(&pred, &y, 1), false);
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

    fn quick_config() -> ExpertConfig {
        ExpertConfig {
            hidden: vec![16, 16],
            max_epochs: 20,
            ..ExpertConfig::default()
        }
    }

    #[test]
    fn registry_rules() {
        let split = generate_dataset(Task::Linear, (200, 20), 1).unwrap();
        let (lin, _) = train_expert(&split, &quick_config(), 0).unwrap();
        let split = generate_dataset(Task::Nonlinear, (200, 20), 1).unwrap();
        let (non, _) = train_expert(&split, &quick_config(), 0).unwrap();
        let mut set = ExpertSet::new();
        set.register(non.clone()).unwrap();
        set.register(lin.clone()).unwrap();
        assert_eq!(set.n_classes(), 3);
        assert!(set.router_stale());
        assert!(matches!(set.register(lin.clone()), Err(PiernError::DuplicateExpert(_))));
        let mut unfrozen = lin.clone();
        unfrozen.id = "other".into();
        unfrozen.frozen = false;
        assert!(matches!(set.register(unfrozen), Err(PiernError::NotFrozen(_))));
        assert_eq!(set.class_of("linear").unwrap(), 2);
        assert!(set.predict("missing", &[0.0; 4]).is_err());
        assert!(set.predict("linear", &[0.0; 3]).is_err());
    }

    #[test]
    fn registry_round_trip() {
        let split = generate_dataset(Task::Linear, (100, 10), 3).unwrap();
        let (lin, _) = train_expert(&split, &quick_config(), 1).unwrap();
        let split = generate_dataset(Task::Nonlinear, (100, 10), 3).unwrap();
        let (non, _) = train_expert(&split, &quick_config(), 1).unwrap();
        let mut set = ExpertSet::new();
        set.register(lin).unwrap();
        set.register(non).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = set.save(dir.path()).unwrap();
        let back = ExpertSet::load(&path).unwrap();
        assert_eq!(back.ids(), vec!["linear", "nonlinear"]);
        assert_eq!(back.registry_hash(), set.registry_hash());
        let x = [0.01, 0.1, 100.0, 0.5];
        assert_eq!(back.predict("linear", &x).unwrap().to_bits(), set.predict("linear", &x).unwrap().to_bits());
    }

    #[test]
    fn frozen_prediction_is_stable() {
        let split = generate_dataset(Task::Linear, (200, 20), 2).unwrap();
        let (m, report) = train_expert(&split, &quick_config(), 0).unwrap();
        assert!(m.is_frozen());
        assert_eq!(m.frozen_hash().unwrap(), m.compute_hash());
        let x = [0.01, 0.1, 100.0, 0.5];
        assert_eq!(m.predict(&x).unwrap().to_bits(), m.predict(&x).unwrap().to_bits());
        assert!(report.train_mse_norm.is_finite());
    }
}

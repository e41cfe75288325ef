//! Stage 3: the token router.
//!
//! A two-layer head over the frozen backbone's hidden state at each position
//! decides where the next token comes from: class 0 is the language model,
//! class `i` is the `i`-th registered expert.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint;
use crate::error::{PiernError, Result};
use crate::expert::{ExpertSet, LM_CLASS};
use crate::nn::{Activation, Mlp};
use crate::numerics::ops::softmax_in_place;
use crate::numerics::{hash_params, Adam, AdamConfig, Parameter};
use crate::templates::TaskText;
use crate::tokenizer::{Vocabulary, BOS, EOS};

const NORMALIZATION_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64], what: &'static str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(PiernError::OutOfRange(format!("{what}: entries must be finite and non-negative")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(PiernError::OutOfRange(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Routing cross-entropy `-sum_t sum_e y_{t,e} ln p_t(e)`, summed over tokens.
pub fn router_ce(p: &[Vec<f64>], onehot: &[Vec<f64>]) -> Result<f64> {
    if p.len() != onehot.len() || p.iter().zip(onehot).any(|(a, b)| a.len() != b.len()) {
        return Err(PiernError::Shape("router probabilities vs labels".into()));
    }
    let mut loss = 0.0;
    for (pt, yt) in p.iter().zip(onehot) {
        check_distribution(pt, "router distribution")?;
        if yt.iter().filter(|&&y| y == 1.0).count() != 1 || yt.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(PiernError::OutOfRange("label is not one-hot".into()));
        }
        for (pe, ye) in pt.iter().zip(yt) {
            if *ye == 1.0 {
                loss -= pe.ln();
            }
        }
    }
    Ok(loss)
}

/// Binary cross-entropy on the expert probability, summed over tokens.
pub fn bce(p_expert: &[f64], y: &[f64]) -> Result<f64> {
    if p_expert.len() != y.len() {
        return Err(PiernError::Shape("bce probabilities vs labels".into()));
    }
    let mut loss = 0.0;
    for (&p, &t) in p_expert.iter().zip(y) {
        if !(0.0..=1.0).contains(&p) || (t != 0.0 && t != 1.0) {
            return Err(PiernError::OutOfRange(format!("bce got p = {p}, y = {t}")));
        }
        loss -= if t == 1.0 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(loss)
}

/// Argmax with ties resolved toward the lowest class, i.e. toward the LM.
pub fn argmax_route(scores: &[f64]) -> usize {
    let mut best = LM_CLASS;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Token ids of one rendered text and the routing class of every decoding
/// step: `labels[t]` says who produces `ids[t + 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingExample {
    pub ids: Vec<u32>,
    pub labels: Vec<usize>,
}

impl RoutingExample {
    pub fn expert_positions(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&t| self.labels[t] != LM_CLASS).collect()
    }
}

/// Labels derived against one expert registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingSet {
    pub examples: Vec<RoutingExample>,
    pub n_classes: usize,
    pub registry_hash: String,
}

impl RoutingSet {
    pub fn positions(&self) -> usize {
        self.examples.iter().map(|e| e.labels.len()).sum()
    }
}

/// Labels the step that emits the first answer token with the text's expert
/// and every other step with the LM.
pub fn derive_labels(text: &TaskText, vocab: &Vocabulary, experts: &ExpertSet) -> Result<RoutingExample> {
    let class = experts.class_of(&text.expert_id)?;
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(&text.text)?);
    ids.push(EOS);
    let end = vocab
        .encode_prefix(&text.text, text.answer_anchor)?
        .ok_or(PiernError::AnchorNotOnBoundary(text.answer_anchor))?
        .len()
        + 1;
    if ids.len() <= end {
        return Err(PiernError::AnchorNotOnBoundary(text.answer_anchor));
    }
    let mut labels = vec![LM_CLASS; ids.len() - 1];
    labels[end - 1] = class;
    Ok(RoutingExample { ids, labels })
}

pub fn derive_routing_set(texts: &[TaskText], vocab: &Vocabulary, experts: &ExpertSet) -> Result<RoutingSet> {
    Ok(RoutingSet {
        examples: texts
            .iter()
            .map(|t| derive_labels(t, vocab, experts))
            .collect::<Result<_>>()?,
        n_classes: experts.n_classes(),
        registry_hash: experts.registry_hash(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub hidden: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            activation: Activation::Gelu,
            epochs: 4,
            batch_size: 128,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    pub net: Mlp,
    /// Registry the router was trained against.
    pub registry_hash: String,
    pub expert_ids: Vec<String>,
}

impl RouterModel {
    pub fn new<R: rand::Rng + ?Sized>(d_model: usize, hidden: usize, activation: Activation, experts: &ExpertSet, rng: &mut R) -> Self {
        Self {
            net: Mlp::new(&[d_model, hidden, experts.n_classes()], activation, rng),
            registry_hash: experts.registry_hash(),
            expert_ids: experts.ids().iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.net.predict(h, 1)
    }

    /// `p(e | h)` over all routing classes.
    pub fn probs(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut p = self.logits(h)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    pub fn route(&self, h: &[f64]) -> Result<usize> {
        Ok(argmax_route(&self.logits(h)?))
    }

    pub fn macs(&self) -> u64 {
        self.net.macs_per_row()
    }

    pub fn hash(&self) -> String {
        hash_params(&self.net.params)
    }

    pub fn freeze(&mut self) {
        self.net.params.iter_mut().for_each(Parameter::freeze);
    }

    pub fn is_frozen(&self) -> bool {
        self.net.params.iter().all(|p| !p.trainable)
    }

    pub fn check_registry(&self, experts: &ExpertSet) -> Result<()> {
        let found = experts.registry_hash();
        if found != self.registry_hash {
            return Err(PiernError::RegistryMismatch {
                expected: self.registry_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Class-weighted cross-entropy over `rows` hidden states; accumulates
    /// parameter gradients. With unit weights this is [`router_ce`].
    pub fn loss_and_grad(&mut self, hidden: &[f64], labels: &[usize], weights: &[f64]) -> Result<f64> {
        let rows = labels.len();
        let c = self.n_classes();
        let (mut p, cache) = self.net.forward(hidden, rows)?;
        let mut loss = 0.0;
        for (t, &y) in labels.iter().enumerate() {
            let row = &mut p[t * c..(t + 1) * c];
            softmax_in_place(row);
            let w = weights[y];
            loss -= w * row[y].ln();
            for (e, v) in row.iter_mut().enumerate() {
                *v = w * (*v - if e == y { 1.0 } else { 0.0 });
            }
        }
        if !loss.is_finite() {
            return Err(PiernError::NonFinite("router loss"));
        }
        self.net.backward(&cache, &p, false);
        Ok(loss)
    }

    pub fn save(&self, stem: &Path, backbone_hash: &str) -> Result<String> {
        let file = RouterFile {
            dims: self.net.dims.clone(),
            activation: self.net.activation,
            registry_hash: self.registry_hash.clone(),
            expert_ids: self.expert_ids.clone(),
        };
        let mut meta = BTreeMap::new();
        meta.insert("backbone_hash".into(), backbone_hash.to_string());
        let names = checkpoint::layer_names(&self.net.params);
        checkpoint::save(stem, "router", &file, meta, &checkpoint::named(&names, &self.net.params))
    }

    /// Loads a frozen router and the backbone hash it was trained against.
    pub fn load(stem: &Path) -> Result<(Self, String)> {
        let (manifest, params) = checkpoint::load(stem)?;
        manifest.expect_kind("router")?;
        let f: RouterFile = manifest.config()?;
        if f.dims.len() != 3 || params.len() != 4 {
            return Err(PiernError::Checkpoint(format!("router has {} tensors", params.len())));
        }
        let router = Self {
            net: Mlp {
                dims: f.dims,
                activation: f.activation,
                params,
            },
            registry_hash: f.registry_hash,
            expert_ids: f.expert_ids,
        };
        Ok((router, manifest.meta("backbone_hash")?.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct RouterFile {
    dims: Vec<usize>,
    activation: Activation,
    registry_hash: String,
    expert_ids: Vec<String>,
}

/// Teacher-forced backbone states for every labeled step.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingFeatures {
    pub d_model: usize,
    /// Row-major, one row per labeled position.
    pub hidden: Vec<f64>,
    pub labels: Vec<usize>,
}

impl RoutingFeatures {
    pub fn from_set(backbone: &Backbone, set: &RoutingSet) -> Result<Self> {
        let d = backbone.d_model();
        let mut hidden = Vec::with_capacity(set.positions() * d);
        let mut labels = Vec::with_capacity(set.positions());
        for e in &set.examples {
            let st = backbone.lm_forward(&e.ids)?;
            hidden.extend_from_slice(&st.hidden()[..e.labels.len() * d]);
            labels.extend_from_slice(&e.labels);
        }
        Ok(Self { d_model: d, hidden, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.d_model..(i + 1) * self.d_model]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingQuality {
    pub positions: usize,
    pub accuracy: f64,
    /// Share of expert-labeled positions routed to exactly their expert.
    pub expert_recall: f64,
    pub expert_positions: usize,
}

pub fn evaluate_router(router: &RouterModel, features: &RoutingFeatures) -> Result<RoutingQuality> {
    let mut correct = 0;
    let mut hits = 0;
    let mut experts = 0;
    for i in 0..features.len() {
        let y = features.labels[i];
        let r = router.route(features.row(i))?;
        correct += usize::from(r == y);
        if y != LM_CLASS {
            experts += 1;
            hits += usize::from(r == y);
        }
    }
    let n = features.len().max(1) as f64;
    Ok(RoutingQuality {
        positions: features.len(),
        accuracy: correct as f64 / n,
        expert_recall: if experts == 0 { 1.0 } else { hits as f64 / experts as f64 },
        expert_positions: experts,
    })
}

/// Per-class loss weights: 1 for the LM, and for each expert the ratio of LM
/// positions to that expert's positions.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let lm = counts[LM_CLASS] as f64;
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| if c == LM_CLASS || n == 0 { 1.0 } else { lm / n as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub epoch_losses: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub heldout: RoutingQuality,
    pub seconds: f64,
}

/// Trains a router on teacher-forced states of the frozen backbone. Labels
/// must have been derived against the current registry.
pub fn train_router(
    train: &RoutingSet,
    heldout: &RoutingSet,
    backbone: &Backbone,
    experts: &ExpertSet,
    config: &RouterConfig,
    seed: u64,
) -> Result<(RouterModel, RouterReport)> {
    let current = experts.registry_hash();
    for set in [train, heldout] {
        if set.registry_hash != current {
            return Err(PiernError::RegistryMismatch {
                expected: set.registry_hash.clone(),
                found: current,
            });
        }
    }
    if !backbone.is_frozen() {
        return Err(PiernError::NotFrozen("backbone".into()));
    }
    if config.batch_size == 0 {
        return Err(PiernError::Config("router batch size must be positive".into()));
    }
    let start = Instant::now();
    let features = RoutingFeatures::from_set(backbone, train)?;
    if features.is_empty() {
        return Err(PiernError::Empty("router training set"));
    }
    let held = RoutingFeatures::from_set(backbone, heldout)?;
    let weights = class_weights(&features.labels, experts.n_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut router = RouterModel::new(backbone.d_model(), config.hidden, config.activation, experts, &mut rng);
    let mut opt = {
        let refs: Vec<&mut Parameter> = router.net.params.iter_mut().collect();
        Adam::new(config.adam, &refs)
    };
    let d = features.d_model;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * d);
            let mut y = Vec::with_capacity(batch.len());
            for &i in batch {
                x.extend_from_slice(features.row(i));
                y.push(features.labels[i]);
            }
            router.net.zero_grad();
            let loss = router.loss_and_grad(&x, &y, &weights)?;
            if !loss.is_finite() {
                return Err(PiernError::Diverged { epoch, loss });
            }
            total += loss;
            let mut refs: Vec<&mut Parameter> = router.net.params.iter_mut().collect();
            opt.step(&mut refs)?;
        }
        epoch_losses.push(total / features.len() as f64);
    }
    router.freeze();
    let heldout = evaluate_router(&router, &held)?;
    Ok((
        router,
        RouterReport {
            epoch_losses,
            class_weights: weights,
            heldout,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

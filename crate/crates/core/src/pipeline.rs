//! Stage runners behind the CLI. Every stage reads its inputs from and writes
//! its outputs to the directories named by a [`RunConfig`]; later stages
//! verify the hashes recorded by earlier ones before using their artifacts.
//!
//! Layout:
//!
//! ```text
//! <data>/<task>.jsonl, <data>/manifest.json
//! <ckpt>/vocab.json, <ckpt>/backbone.*, <ckpt>/experts/, <ckpt>/aligner_<id>.*, <ckpt>/router.*
//! <ckpt>/reports/<stage>.json
//! <report>/requests.csv, <report>/metrics.json, <report>/summary.md
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{vocabulary_corpus, AgentConfig, AgentPipeline, StagePrompts, TokenDecomposition};
use crate::backbone::{train_lm, Backbone, LmTrainConfig, LmTrainReport};
use crate::bench::{markdown_report, run_bench, write_csv, BenchOutput, BenchSettings, MetricsRecord, ReportContext, Tolerance};
use crate::config::RunConfig;
use crate::datagen::{file_hash, generate_dataset, read_jsonl, write_jsonl, DatasetSplit, Task};
use crate::error::{PiernError, Result};
use crate::expert::{train_expert, ExpertConfig, ExpertReport, ExpertSet};
use crate::inference::Piern;
use crate::router::{derive_routing_set, train_router, RouterConfig, RouterModel, RouterReport};
use crate::templates::{build_stage_datasets, TaskText, TemplateSet};
use crate::text2comp::{train_text2comp, AlignExample, Aligner, AlignerConfig, Stage2Config, Stage2Report};
use crate::tokenizer::{Vocabulary, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub sha256: String,
    pub seed: u64,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataManifest {
    pub datasets: BTreeMap<String, DatasetEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PiernError::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| PiernError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PiernError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn report_path(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.checkpoint_dir().join("reports").join(format!("{stage}.json"))
}

pub fn gen_data(cfg: &RunConfig) -> Result<DataManifest> {
    let dir = cfg.data_dir();
    let mut datasets = BTreeMap::new();
    for task in cfg.task_list()? {
        let seed = cfg.stage_seed(&format!("data-{task}"));
        let (train, test) = cfg.sizes(task);
        let split = generate_dataset(task, (train, test), seed)?;
        let file = format!("{task}.jsonl");
        let path = dir.join(&file);
        write_jsonl(&split, &path)?;
        datasets.insert(
            task.id().to_string(),
            DatasetEntry {
                file,
                sha256: file_hash(&path)?,
                seed,
                train,
                test,
            },
        );
    }
    let manifest = DataManifest { datasets };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_data_manifest(cfg: &RunConfig) -> Result<DataManifest> {
    read_json(&cfg.data_dir().join("manifest.json"))
}

/// Reads a task's dataset and checks it against the manifest hash.
pub fn load_dataset(cfg: &RunConfig, task: Task) -> Result<DatasetSplit> {
    let manifest = load_data_manifest(cfg)?;
    let entry = manifest
        .datasets
        .get(task.id())
        .ok_or_else(|| PiernError::Config(format!("no dataset for {task}; run gen-data")))?;
    let path = cfg.data_dir().join(&entry.file);
    let found = file_hash(&path)?;
    if found != entry.sha256 {
        return Err(PiernError::HashMismatch {
            what: path.display().to_string(),
            expected: entry.sha256.clone(),
            found,
        });
    }
    read_jsonl(&path)
}

pub fn templates(cfg: &RunConfig, task: Task) -> Result<TemplateSet> {
    match &cfg.template_dir {
        Some(dir) => TemplateSet::load(task, &dir.join(format!("{task}.txt"))),
        None => Ok(TemplateSet::builtin(task)),
    }
}

pub fn stage_prompts(cfg: &RunConfig) -> Result<StagePrompts> {
    match &cfg.agent_prompt_dir {
        Some(dir) => StagePrompts::load(dir),
        None => Ok(StagePrompts::default()),
    }
}

/// Rendered texts of a task: `(train, test)`.
pub fn task_texts(cfg: &RunConfig, task: Task, split: &DatasetSplit) -> Result<(Vec<TaskText>, Vec<TaskText>)> {
    let t = templates(cfg, task)?;
    let (_, train) = build_stage_datasets(&split.train, &t, cfg.stage_seed(&format!("render-train-{task}")))?;
    let (_, test) = build_stage_datasets(&split.test, &t, cfg.stage_seed(&format!("render-test-{task}")))?;
    Ok((train, test))
}

fn all_texts(cfg: &RunConfig) -> Result<Vec<(Task, Vec<TaskText>, Vec<TaskText>)>> {
    cfg.task_list()?
        .into_iter()
        .map(|task| {
            let split = load_dataset(cfg, task)?;
            let (train, test) = task_texts(cfg, task, &split)?;
            Ok((task, train, test))
        })
        .collect()
}

pub fn vocab_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join("vocab.json")
}

pub fn backbone_stem(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join("backbone")
}

pub fn registry_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join("experts").join("registry.json")
}

pub fn aligner_stem(cfg: &RunConfig, expert_id: &str) -> PathBuf {
    cfg.checkpoint_dir().join(format!("aligner_{expert_id}"))
}

pub fn router_stem(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join("router")
}

fn sequence(vocab: &Vocabulary, text: &str) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text)?);
    ids.push(EOS);
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmStageReport {
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub backbone_hash: String,
    pub sequences: usize,
    pub train: LmTrainReport,
}

/// Builds the vocabulary and trains the backbone on rendered training texts.
pub fn stage_train_lm(cfg: &RunConfig) -> Result<LmStageReport> {
    let texts = all_texts(cfg)?;
    let tasks: Vec<Task> = texts.iter().map(|(t, _, _)| *t).collect();
    let mut corpus_text: Vec<String> = texts
        .iter()
        .flat_map(|(_, train, _)| train.iter().map(|t| t.text.clone()))
        .collect();
    corpus_text.extend(vocabulary_corpus(&stage_prompts(cfg)?, &tasks));
    let vocab = Vocabulary::build(&corpus_text)?;
    let corpus: Vec<Vec<u32>> = texts
        .iter()
        .flat_map(|(_, train, _)| train.iter().take(cfg.lm_texts_per_task))
        .map(|t| sequence(&vocab, &t.text))
        .collect::<Result<_>>()?;
    let train_cfg = LmTrainConfig {
        epochs: cfg.lm_epochs,
        ..LmTrainConfig::default()
    };
    let (lm, train) = train_lm(&corpus, cfg.lm_config(), vocab.len(), &train_cfg, cfg.stage_seed("lm"))?;
    let vocab_hash = vocab.save(&vocab_path(cfg))?;
    let backbone_hash = lm.save(&backbone_stem(cfg), &vocab_hash)?;
    let report = LmStageReport {
        vocab_size: vocab.len(),
        vocab_hash,
        backbone_hash,
        sequences: corpus.len(),
        train,
    };
    write_json(&report_path(cfg, "train-lm"), &report)?;
    Ok(report)
}

/// Loads the vocabulary and backbone and checks that they belong together.
pub fn load_backbone(cfg: &RunConfig) -> Result<(Vocabulary, Backbone)> {
    let vocab = Vocabulary::load(&vocab_path(cfg))?;
    let (lm, vocab_hash) = Backbone::load(&backbone_stem(cfg))?;
    let found = vocab.hash();
    if found != vocab_hash {
        return Err(PiernError::HashMismatch {
            what: "vocabulary".into(),
            expected: vocab_hash,
            found,
        });
    }
    Ok((vocab, lm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStageReport {
    pub experts: BTreeMap<String, ExpertReport>,
    pub hashes: BTreeMap<String, String>,
    pub registry_hash: String,
}

pub fn expert_config(cfg: &RunConfig, task: Task) -> ExpertConfig {
    ExpertConfig {
        max_epochs: cfg.expert_max_epochs,
        ..ExpertConfig::for_task(task)
    }
}

/// Trains and freezes one expert per task, registered in task order.
pub fn stage_train_experts(cfg: &RunConfig) -> Result<ExpertStageReport> {
    let mut set = ExpertSet::new();
    let mut experts = BTreeMap::new();
    for task in cfg.task_list()? {
        let split = load_dataset(cfg, task)?;
        let (model, report) = train_expert(&split, &expert_config(cfg, task), cfg.stage_seed(&format!("expert-{task}")))?;
        experts.insert(task.id().to_string(), report);
        set.register(model)?;
    }
    set.save(&cfg.checkpoint_dir().join("experts"))?;
    let report = ExpertStageReport {
        experts,
        hashes: set.models().map(|m| (m.id.clone(), m.compute_hash())).collect(),
        registry_hash: set.registry_hash(),
    };
    write_json(&report_path(cfg, "train-expert"), &report)?;
    Ok(report)
}

pub fn load_experts(cfg: &RunConfig) -> Result<ExpertSet> {
    ExpertSet::load(&registry_path(cfg))
}

pub fn stage2_config(cfg: &RunConfig) -> Stage2Config {
    Stage2Config {
        epochs: cfg.aligner_epochs,
        restarts: cfg.aligner_restarts,
        ..Stage2Config::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerStageReport {
    pub aligners: BTreeMap<String, Stage2Report>,
    pub hashes: BTreeMap<String, String>,
}

fn align_examples(backbone: &Backbone, vocab: &Vocabulary, aligner_stats: &crate::datagen::NormStats, texts: &[TaskText]) -> Result<Vec<AlignExample>> {
    texts
        .iter()
        .map(|t| {
            AlignExample::new(
                backbone,
                t.context_ids(vocab)?,
                aligner_stats.normalize_x(&t.parse_features()?),
            )
        })
        .collect()
}

/// Trains one aligner per registered expert on the frozen backbone.
pub fn stage_train_text2comp(cfg: &RunConfig) -> Result<AlignerStageReport> {
    let (vocab, backbone) = load_backbone(cfg)?;
    let experts = load_experts(cfg)?;
    let backbone_hash = backbone.hash();
    let mut aligners = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    for (task, train, test) in all_texts(cfg)? {
        let expert = experts.get(task.id())?;
        let tr = align_examples(&backbone, &vocab, &expert.stats, &train[..cfg.aligner_texts.min(train.len())])?;
        let te = align_examples(&backbone, &vocab, &expert.stats, &test[..cfg.aligner_heldout.min(test.len())])?;
        let (al, report) = train_text2comp(
            &expert.id,
            &expert.stats,
            &tr,
            &te,
            &vocab.number_tokens(),
            backbone.d_model(),
            AlignerConfig::default(),
            &stage2_config(cfg),
            cfg.stage_seed(&format!("aligner-{task}")),
        )?;
        let hash = al.save(&aligner_stem(cfg, &expert.id), &backbone_hash, &expert.compute_hash())?;
        hashes.insert(expert.id.clone(), hash);
        aligners.insert(expert.id.clone(), report);
    }
    let report = AlignerStageReport { aligners, hashes };
    write_json(&report_path(cfg, "train-text2comp"), &report)?;
    Ok(report)
}

fn check_hash(what: String, expected: String, found: String) -> Result<()> {
    if expected != found {
        return Err(PiernError::HashMismatch { what, expected, found });
    }
    Ok(())
}

pub fn load_aligners(cfg: &RunConfig, backbone: &Backbone, experts: &ExpertSet) -> Result<Vec<Aligner>> {
    experts
        .models()
        .map(|m| {
            let (al, bh, eh) = Aligner::load(&aligner_stem(cfg, &m.id))?;
            check_hash(format!("backbone of aligner {}", m.id), bh, backbone.hash())?;
            check_hash(format!("expert of aligner {}", m.id), eh, m.compute_hash())?;
            Ok(al)
        })
        .collect()
}

pub fn router_config(cfg: &RunConfig) -> RouterConfig {
    RouterConfig {
        epochs: cfg.router_epochs,
        ..RouterConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterStageReport {
    pub train_positions: usize,
    pub heldout_positions: usize,
    pub router_hash: String,
    pub train: RouterReport,
}

pub fn stage_train_router(cfg: &RunConfig) -> Result<RouterStageReport> {
    let (vocab, backbone) = load_backbone(cfg)?;
    let experts = load_experts(cfg)?;
    let mut train_texts = Vec::new();
    let mut held_texts = Vec::new();
    for (_, train, test) in all_texts(cfg)? {
        train_texts.extend(train.into_iter().take(cfg.router_texts_per_task));
        held_texts.extend(test.into_iter().take(cfg.router_heldout_texts));
    }
    let train = derive_routing_set(&train_texts, &vocab, &experts)?;
    let held = derive_routing_set(&held_texts, &vocab, &experts)?;
    let (router, report) = train_router(&train, &held, &backbone, &experts, &router_config(cfg), cfg.stage_seed("router"))?;
    let router_hash = router.save(&router_stem(cfg), &backbone.hash())?;
    let report = RouterStageReport {
        train_positions: train.positions(),
        heldout_positions: held.positions(),
        router_hash,
        train: report,
    };
    write_json(&report_path(cfg, "train-router"), &report)?;
    Ok(report)
}

/// Loads all checkpoints and verifies every recorded cross-hash.
pub fn load_system(cfg: &RunConfig) -> Result<Piern> {
    let (vocab, backbone) = load_backbone(cfg)?;
    let experts = load_experts(cfg)?;
    let aligners = load_aligners(cfg, &backbone, &experts)?;
    let (router, bh) = RouterModel::load(&router_stem(cfg))?;
    check_hash("backbone of router".into(), bh, backbone.hash())?;
    Piern::new(vocab, backbone, experts, aligners, router)
}

pub fn bench_settings(cfg: &RunConfig) -> Result<BenchSettings> {
    Ok(BenchSettings {
        requests: cfg.requests,
        warmup: cfg.warmup,
        max_new_tokens: cfg.max_new_tokens,
        mode: cfg.decode_mode()?,
        tolerance: Tolerance {
            rel: cfg.rel_tol,
            abs: cfg.abs_floor,
        },
        seed: cfg.stage_seed("bench"),
    })
}

pub fn report_context(cfg: &RunConfig, system: &Piern) -> Result<ReportContext> {
    let manifest = load_data_manifest(cfg)?;
    let mut seeds = BTreeMap::new();
    seeds.insert("global".to_string(), cfg.seed);
    for (k, e) in &manifest.datasets {
        seeds.insert(format!("data-{k}"), e.seed);
    }
    for stage in ["lm", "router", "bench"] {
        seeds.insert(stage.to_string(), cfg.stage_seed(stage));
    }
    for task in cfg.task_list()? {
        for stage in ["expert", "aligner", "render-train", "render-test"] {
            let name = format!("{stage}-{task}");
            seeds.insert(name.clone(), cfg.stage_seed(&name));
        }
    }
    Ok(ReportContext {
        seeds,
        dataset_hashes: manifest.datasets.iter().map(|(k, e)| (k.clone(), e.sha256.clone())).collect(),
        checkpoints: system.hashes(),
        tolerance: Tolerance {
            rel: cfg.rel_tol,
            abs: cfg.abs_floor,
        },
        decode: cfg.decode.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub context: ReportContext,
    pub metrics: Vec<MetricsRecord>,
    pub decomposition: BTreeMap<String, TokenDecomposition>,
}

/// Bench prompts: the first `requests` rendered test texts of each task.
pub fn bench_prompts(cfg: &RunConfig) -> Result<BTreeMap<Task, Vec<TaskText>>> {
    Ok(all_texts(cfg)?
        .into_iter()
        .map(|(task, _, test)| (task, test.into_iter().take(cfg.requests).collect()))
        .collect())
}

/// Runs the benchmark and writes `requests.csv`, `metrics.json` and `summary.md`.
pub fn stage_bench(cfg: &RunConfig) -> Result<BenchOutput> {
    let system = load_system(cfg)?;
    let agent = AgentPipeline::new(
        &system,
        stage_prompts(cfg)?,
        AgentConfig {
            max_completion: cfg.agent_max_completion,
        },
    );
    let ctx = report_context(cfg, &system)?;
    let out = run_bench(&system, &agent, &bench_prompts(cfg)?, &bench_settings(cfg)?)?;
    let dir = cfg.report_dir();
    fs::create_dir_all(&dir).map_err(|e| PiernError::io(&dir, e))?;
    write_csv(&out.rows, &dir.join("requests.csv"))?;
    write_json(
        &dir.join("metrics.json"),
        &MetricsFile {
            context: ctx,
            metrics: out.metrics.clone(),
            decomposition: out.decomposition.clone(),
        },
    )?;
    stage_report(cfg)?;
    Ok(out)
}

/// Rewrites `summary.md` from `metrics.json` and returns it.
pub fn stage_report(cfg: &RunConfig) -> Result<String> {
    let dir = cfg.report_dir();
    let m: MetricsFile = read_json(&dir.join("metrics.json"))?;
    let md = markdown_report(&m.context, &m.metrics, &m.decomposition);
    let path = dir.join("summary.md");
    fs::write(&path, &md).map_err(|e| PiernError::io(&path, e))?;
    Ok(md)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<BenchOutput> {
    gen_data(cfg)?;
    stage_train_lm(cfg)?;
    stage_train_experts(cfg)?;
    stage_train_text2comp(cfg)?;
    stage_train_router(cfg)?;
    stage_bench(cfg)
}

//! Run configuration: a flat key-value file (TOML syntax, no tables).
//!
//! ```text
//! seed = 7
//! out_dir = "runs/desk"
//! requests = 200
//! rel_tol = 0.01
//! ```
//!
//! Every key is optional; see [`RunConfig::default`] for the values used when
//! a key is absent.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{DecodeMode, LmConfig};
use crate::datagen::Task;
use crate::error::{PiernError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Task ids, in expert registration order.
    pub tasks: Vec<String>,

    pub nonlinear_train: usize,
    pub nonlinear_test: usize,
    pub linear_train: usize,
    pub linear_test: usize,

    /// Overrides for `<out_dir>/data`, `<out_dir>/checkpoints` and `<out_dir>/bench`.
    pub data_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    /// Directory holding `<task>.txt` prompt templates; built-ins when absent.
    pub template_dir: Option<PathBuf>,
    /// Directory holding the five agent stage prompts; built-ins when absent.
    pub agent_prompt_dir: Option<PathBuf>,

    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_d_model: usize,
    pub lm_context: usize,
    pub lm_texts_per_task: usize,
    pub lm_epochs: usize,

    pub expert_max_epochs: usize,

    pub aligner_texts: usize,
    pub aligner_heldout: usize,
    pub aligner_epochs: usize,
    pub aligner_restarts: usize,

    pub router_texts_per_task: usize,
    pub router_heldout_texts: usize,
    pub router_epochs: usize,

    pub requests: usize,
    pub warmup: usize,
    pub max_new_tokens: usize,
    /// `greedy` or `sample`.
    pub decode: String,
    pub temperature: f64,
    pub agent_max_completion: usize,

    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = LmConfig::desk();
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            tasks: Task::ALL.iter().map(|t| t.id().to_string()).collect(),
            nonlinear_train: Task::Nonlinear.default_sizes().0,
            nonlinear_test: Task::Nonlinear.default_sizes().1,
            linear_train: Task::Linear.default_sizes().0,
            linear_test: Task::Linear.default_sizes().1,
            data_dir: None,
            checkpoint_dir: None,
            report_dir: None,
            template_dir: None,
            agent_prompt_dir: None,
            lm_layers: lm.layers,
            lm_heads: lm.heads,
            lm_d_model: lm.d_model,
            lm_context: lm.context,
            lm_texts_per_task: 400,
            lm_epochs: 6,
            expert_max_epochs: 400,
            aligner_texts: 2000,
            aligner_heldout: 300,
            aligner_epochs: 60,
            aligner_restarts: 2,
            router_texts_per_task: 300,
            router_heldout_texts: 100,
            router_epochs: 4,
            requests: 200,
            warmup: 3,
            max_new_tokens: 64,
            decode: "greedy".into(),
            temperature: 1.0,
            agent_max_completion: 48,
            rel_tol: 0.01,
            abs_floor: 1e-3,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PiernError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PiernError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PiernError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(PiernError::Config("no tasks".into()));
        }
        for t in &self.tasks {
            t.parse::<Task>()?;
        }
        for (name, dir) in [("template_dir", &self.template_dir), ("agent_prompt_dir", &self.agent_prompt_dir)] {
            if let Some(d) = dir {
                if !d.is_dir() {
                    return Err(PiernError::Config(format!("{name} {} does not exist", d.display())));
                }
            }
        }
        if !(self.rel_tol >= 0.0 && self.abs_floor >= 0.0) {
            return Err(PiernError::Config("tolerances must be non-negative".into()));
        }
        if self.requests == 0 {
            return Err(PiernError::Config("requests must be positive".into()));
        }
        self.decode_mode()?;
        self.lm_config().validate()
    }

    pub fn task_list(&self) -> Result<Vec<Task>> {
        self.tasks.iter().map(|t| t.parse()).collect()
    }

    pub fn sizes(&self, task: Task) -> (usize, usize) {
        match task {
            Task::Nonlinear => (self.nonlinear_train, self.nonlinear_test),
            Task::Linear => (self.linear_train, self.linear_test),
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            layers: self.lm_layers,
            heads: self.lm_heads,
            d_model: self.lm_d_model,
            context: self.lm_context,
            ff_mult: LmConfig::desk().ff_mult,
        }
    }

    pub fn decode_mode(&self) -> Result<DecodeMode> {
        match self.decode.as_str() {
            "greedy" => Ok(DecodeMode::Greedy),
            "sample" => Ok(DecodeMode::Sample {
                temperature: self.temperature,
            }),
            other => Err(PiernError::Config(format!("unknown decode mode `{other}`"))),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.report_dir.clone().unwrap_or_else(|| self.out_dir.join("bench"))
    }

    /// Stage seeds derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let salt = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        self.seed ^ salt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_file_round_trips() {
        let cfg = RunConfig::parse("seed = 11\nrequests = 5\ndecode = \"sample\"\ntemperature = 0.5\n").unwrap();
        assert_eq!((cfg.seed, cfg.requests), (11, 5));
        assert_eq!(cfg.decode_mode().unwrap(), DecodeMode::Sample { temperature: 0.5 });
        assert_eq!(RunConfig::parse(&cfg.to_text().unwrap()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("tasks = [\"quadratic\"]").is_err());
        assert!(RunConfig::parse("decode = \"beam\"").is_err());
        assert!(RunConfig::parse("template_dir = \"/no/such/dir\"").is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let c = RunConfig::default();
        assert_ne!(c.stage_seed("lm"), c.stage_seed("router"));
        assert_eq!(c.stage_seed("lm"), RunConfig::default().stage_seed("lm"));
    }
}

//! Five-stage function-calling pipeline over the same backbone, experts and
//! aligners as [`Piern`]: the LM restates the task, writes a tool call, the
//! arguments are aligned, the expert runs, and the LM reports the result.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backbone::{next_token, DecodeMode};
use crate::datagen::Task;
use crate::error::{PiernError, Result};
use crate::expert::ExpertModel;
use crate::inference::Piern;
use crate::templates::{answer_cue, ANSWER_VERB};
use crate::tokenizer::{format_number, BOS, EOS};

pub const STAGES: [&str; 5] = [
    "task understanding",
    "tool invocation confirmation",
    "data alignment",
    "expert computation",
    "result analysis",
];

const FILES: [&str; 5] = ["understanding.txt", "tool_call.txt", "alignment.txt", "computation.txt", "analysis.txt"];

const BUILTIN: [&str; 5] = [
    include_str!("../assets/agent/understanding.txt"),
    include_str!("../assets/agent/tool_call.txt"),
    include_str!("../assets/agent/alignment.txt"),
    include_str!("../assets/agent/computation.txt"),
    include_str!("../assets/agent/analysis.txt"),
];

/// Plain-text prompt templates, one per stage. Placeholders: `{task}`,
/// `{paraphrase}`, `{tools}`, `{tool_call}`, `{expert}`, `{arguments}`, `{result}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePrompts {
    pub templates: [String; 5],
}

impl Default for StagePrompts {
    fn default() -> Self {
        Self {
            templates: BUILTIN.map(|s| s.trim_end().to_string()),
        }
    }
}

impl StagePrompts {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut templates = BUILTIN.map(String::from);
        for (t, f) in templates.iter_mut().zip(FILES) {
            let path = dir.join(f);
            *t = std::fs::read_to_string(&path)
                .map_err(|e| PiernError::io(&path, e))?
                .trim_end()
                .to_string();
        }
        Ok(Self { templates })
    }

    /// Template text with placeholders removed, for vocabulary building.
    pub fn corpus(&self) -> Vec<String> {
        let re = Regex::new(r"\{[a-z_]+\}").expect("valid pattern");
        self.templates.iter().map(|t| re.replace_all(t, " ").into_owned()).collect()
    }

    fn fill(&self, stage: usize, vars: &[(&str, &str)]) -> String {
        let mut s = self.templates[stage].clone();
        for (k, v) in vars {
            s = s.replace(&format!("{{{k}}}"), v);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Completion budget of each LM stage.
    pub max_completion: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { max_completion: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStageRecord {
    pub stage: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub seconds: f64,
}

impl AgentStageRecord {
    pub fn tokens(&self) -> usize {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed,
    AlignerFallback,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub expert_id: String,
    pub args: Vec<(String, String)>,
    pub status: ParseStatus,
}

impl ToolCall {
    pub fn values(&self) -> Option<Vec<f64>> {
        self.args.iter().map(|(_, v)| v.parse().ok()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRun {
    /// Final answer text, or `None` when the pipeline failed.
    pub answer: Option<String>,
    pub records: Vec<AgentStageRecord>,
    pub tool_call: ToolCall,
    pub value: Option<f64>,
    pub macs: u64,
}

impl AgentRun {
    pub fn total_tokens(&self) -> usize {
        self.records.iter().map(AgentStageRecord::tokens).sum()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| PiernError::io("<agent records>", e))?;
        }
        Ok(())
    }
}

/// Per-stage token totals in [`STAGES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDecomposition {
    pub totals: Vec<(String, usize)>,
    pub shares: Vec<f64>,
    pub total: usize,
}

pub fn decompose_tokens(records: &[AgentStageRecord]) -> Result<TokenDecomposition> {
    if records.is_empty() {
        return Err(PiernError::Empty("stage records"));
    }
    let mut names: Vec<String> = STAGES.iter().map(|s| s.to_string()).collect();
    for r in records {
        if !names.contains(&r.stage) {
            names.push(r.stage.clone());
        }
    }
    let mut totals: Vec<(String, usize)> = names.into_iter().map(|n| (n, 0)).collect();
    for r in records {
        let slot = totals.iter_mut().find(|(n, _)| *n == r.stage).expect("stage listed");
        slot.1 += r.tokens();
    }
    totals.retain(|(n, t)| *t > 0 || records.iter().any(|r| r.stage == *n));
    let total: usize = totals.iter().map(|(_, t)| t).sum();
    let shares = totals
        .iter()
        .map(|(_, t)| if total == 0 { 1.0 / totals.len() as f64 } else { *t as f64 / total as f64 })
        .collect();
    Ok(TokenDecomposition { totals, shares, total })
}

fn call_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"([A-Za-z_][A-Za-z0-9_]*)\s*\(").expect("valid pattern"))
}

fn arg_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(-?[0-9]+(?:\.[0-9]+)?)").expect("valid pattern"))
}

pub fn arg_name(i: usize) -> String {
    format!("x{i}")
}

/// Reads `name=value` pairs for `x0..x{dim-1}`; `None` unless every input is present exactly once.
pub fn parse_args(text: &str, dim: usize) -> Option<Vec<(String, String)>> {
    let mut found: Vec<Option<String>> = vec![None; dim];
    for c in arg_pattern().captures_iter(text) {
        let key = &c[1];
        let idx = (0..dim).find(|&i| arg_name(i) == key)?;
        if found[idx].is_some() {
            return None;
        }
        let v = &c[2];
        if !v.parse::<f64>().is_ok_and(f64::is_finite) {
            return None;
        }
        found[idx] = Some(v.to_string());
    }
    found
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.map(|v| (arg_name(i), v)))
        .collect()
}

/// Tool-list line for an expert.
pub fn describe_tool(id: &str, task: Task) -> String {
    let args: Vec<String> = (0..task.input_dim()).map(arg_name).collect();
    let topic = answer_cue(task).trim_end_matches(ANSWER_VERB).trim();
    format!("- {id}({}) computes the {topic}", args.join(", "))
}

/// Stage prompt text and tool lines, for building a vocabulary that covers the agent's prompts.
pub fn vocabulary_corpus(prompts: &StagePrompts, tasks: &[Task]) -> Vec<String> {
    let mut out = prompts.corpus();
    out.extend(tasks.iter().map(|t| describe_tool(t.id(), *t)));
    out.push("x0=0.0000, x1=-1.0000".into());
    out
}

pub struct AgentPipeline<'a> {
    pub system: &'a Piern,
    pub prompts: StagePrompts,
    pub config: AgentConfig,
}

struct Completion {
    prompt_tokens: usize,
    ids: Vec<u32>,
    text: String,
    macs: u64,
}

impl<'a> AgentPipeline<'a> {
    pub fn new(system: &'a Piern, prompts: StagePrompts, config: AgentConfig) -> Self {
        Self { system, prompts, config }
    }

    /// Plain LM continuation of `prompt`, greedy unless `mode` says otherwise.
    fn complete<R: Rng + ?Sized>(&self, prompt: &str, mode: DecodeMode, rng: &mut R) -> Result<Completion> {
        let lm = &self.system.backbone;
        let mut ids = vec![BOS];
        ids.extend(self.system.vocab.encode(prompt)?);
        let max = lm.config.context;
        if ids.len() > max {
            return Err(PiernError::ContextOverflow { len: ids.len(), max });
        }
        let prompt_tokens = ids.len();
        let mut st = lm.start();
        lm.append(&mut st, &ids)?;
        let mut out = Vec::new();
        while out.len() < self.config.max_completion {
            let t = next_token(st.logits(), mode, rng);
            out.push(t);
            if t == EOS || st.len() >= max {
                break;
            }
            lm.append(&mut st, &[t])?;
        }
        Ok(Completion {
            prompt_tokens,
            text: self.system.vocab.decode(&out)?,
            ids: out,
            macs: st.macs(),
        })
    }

    fn choose_expert(&self, prompt: &str, tool_call: &str) -> Result<&ExpertModel> {
        let experts = &self.system.experts;
        if let Some(id) = call_pattern()
            .captures_iter(tool_call)
            .map(|c| c[1].to_string())
            .find(|id| experts.get(id).is_ok())
        {
            return experts.get(&id);
        }
        experts
            .models()
            .filter_map(|m| {
                let topic = answer_cue(m.task).trim_end_matches(ANSWER_VERB).trim();
                prompt.rfind(topic).map(|at| (at, m))
            })
            .max_by_key(|(at, _)| *at)
            .map(|(_, m)| m)
            .ok_or_else(|| PiernError::UnknownExpert("no tool matches the request".into()))
    }

    pub fn run<R: Rng + ?Sized>(&self, prompt: &str, mode: DecodeMode, rng: &mut R) -> Result<AgentRun> {
        let sys = self.system;
        let mut records = Vec::with_capacity(5);
        let mut macs = 0u64;
        let mut record = |stage: usize, p: usize, c: usize, t: Instant| {
            records.push(AgentStageRecord {
                stage: STAGES[stage].to_string(),
                prompt_tokens: p,
                completion_tokens: c,
                seconds: t.elapsed().as_secs_f64(),
            })
        };

        let t = Instant::now();
        let understand = self.complete(&self.prompts.fill(0, &[("task", prompt)]), mode, rng)?;
        macs += understand.macs;
        record(0, understand.prompt_tokens, understand.ids.len(), t);

        let t = Instant::now();
        let tools: Vec<String> = sys.experts.models().map(|m| describe_tool(&m.id, m.task)).collect();
        let call = self.complete(
            &self.prompts.fill(
                1,
                &[("tools", &tools.join("\n")), ("task", prompt), ("paraphrase", understand.text.trim())],
            ),
            mode,
            rng,
        )?;
        macs += call.macs;
        record(1, call.prompt_tokens, call.ids.len(), t);
        let expert = self.choose_expert(prompt, &call.text)?;
        let class = sys.experts.class_of(&expert.id)?;
        let dim = expert.input_dim();

        let t = Instant::now();
        let align = self.complete(&self.prompts.fill(2, &[("task", prompt), ("tool_call", call.text.trim())]), mode, rng)?;
        macs += align.macs;
        let mut prompt_tokens = align.prompt_tokens;
        let parsed = parse_args(&align.text, dim).or_else(|| parse_args(&call.text, dim));
        let tool_call = match parsed {
            Some(args) => ToolCall {
                expert_id: expert.id.clone(),
                args,
                status: ParseStatus::Parsed,
            },
            None => {
                let aligner = &sys.aligners[class - 1];
                let context = format!("{prompt} {ANSWER_VERB}");
                let mut ids = vec![BOS];
                match sys.vocab.encode_prefix(&format!("{context}0"), context.len())? {
                    Some(prefix) => ids.extend(prefix),
                    None => ids.extend(sys.vocab.encode(&context)?),
                }
                prompt_tokens += ids.len();
                let extracted = sys.backbone.lm_forward(&ids).and_then(|st| {
                    macs += st.macs() + aligner.macs(&ids);
                    aligner.extract_inputs(&ids, st.hidden())
                });
                match extracted {
                    Ok(z) => {
                        let x = aligner.stats.denormalize_x(&z);
                        let args = x
                            .iter()
                            .enumerate()
                            .map(|(i, v)| Ok((arg_name(i), format_number(*v)?)))
                            .collect::<Result<_>>()?;
                        ToolCall {
                            expert_id: expert.id.clone(),
                            args,
                            status: ParseStatus::AlignerFallback,
                        }
                    }
                    Err(_) => ToolCall {
                        expert_id: expert.id.clone(),
                        args: Vec::new(),
                        status: ParseStatus::Failed,
                    },
                }
            }
        };
        let arguments = tool_call
            .args
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        let completion_tokens = if tool_call.status == ParseStatus::AlignerFallback {
            sys.vocab.encode(&arguments)?.len()
        } else {
            align.ids.len()
        };
        record(2, prompt_tokens, completion_tokens, t);
        let values = match (tool_call.status, tool_call.values()) {
            (ParseStatus::Failed, _) | (_, None) => {
                return Ok(AgentRun {
                    answer: None,
                    records,
                    tool_call,
                    value: None,
                    macs,
                })
            }
            (_, Some(v)) => v,
        };

        let t = Instant::now();
        let message = self.prompts.fill(3, &[("expert", &expert.id), ("arguments", &arguments)]);
        let y = expert.predict(&values)?;
        macs += expert.macs_per_call();
        let result = format_number(y)?;
        record(3, sys.vocab.encode(&message)?.len(), sys.vocab.encode(&result)?.len(), t);

        let t = Instant::now();
        let head = format!("{prompt} {ANSWER_VERB}{result}");
        let analysis_prompt = format!(
            "{} {head}",
            self.prompts.fill(4, &[("expert", &expert.id), ("result", &result), ("task", prompt)])
        );
        let analysis = self.complete(&analysis_prompt, mode, rng)?;
        macs += analysis.macs;
        record(4, analysis.prompt_tokens, analysis.ids.len(), t);

        Ok(AgentRun {
            answer: Some(format!("{head}{}", analysis.text)),
            records,
            tool_call,
            value: Some(y),
            macs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: &str, p: usize, c: usize) -> AgentStageRecord {
        AgentStageRecord {
            stage: stage.into(),
            prompt_tokens: p,
            completion_tokens: c,
            seconds: 0.0,
        }
    }

    #[test]
    fn decomposition_shares() {
        let d = decompose_tokens(&[rec(STAGES[0], 4, 6)]).unwrap();
        assert_eq!(d.totals, vec![(STAGES[0].to_string(), 10)]);
        assert_eq!(d.shares, vec![1.0]);

        let counts = [10, 30, 10, 5, 45];
        let mut records: Vec<_> = STAGES.iter().zip(counts).map(|(s, n)| rec(s, n / 2, n - n / 2)).collect();
        let d = decompose_tokens(&records).unwrap();
        let want = [0.1, 0.3, 0.1, 0.05, 0.45];
        for (s, w) in d.shares.iter().zip(want) {
            assert!((s - w).abs() < 1e-15);
        }
        assert!((d.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(d.total, 100);
        records.reverse();
        assert_eq!(decompose_tokens(&records).unwrap().totals, d.totals);
        assert!(decompose_tokens(&[]).is_err());
    }

    #[test]
    fn args_parse_only_when_complete() {
        let got = parse_args("linear(x1=2.5000, x0=-1.0000)", 2).unwrap();
        assert_eq!(got, vec![("x0".into(), "-1.0000".into()), ("x1".into(), "2.5000".into())]);
        assert_eq!(parse_args("linear(x0=1.0)", 2), None);
        assert_eq!(parse_args("x0=1, x0=2", 1), None);
        assert_eq!(parse_args("x0=1, x5=2", 1), None);
        assert_eq!(parse_args("", 0), Some(vec![]));
    }

    #[test]
    fn builtin_prompts_fill_their_slots() {
        let p = StagePrompts::default();
        let s = p.fill(0, &[("task", "The battery health")]);
        assert!(s.contains("The battery health") && !s.contains("{task}"));
        assert!(p.corpus().iter().all(|t| !t.contains('{')));
    }
}
